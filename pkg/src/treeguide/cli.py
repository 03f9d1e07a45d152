"""Command-line harness: ``treeguide {filter,train,sample,baseline-mcmc,experiment}``.

Exit codes: 0 ok, 2 config/schema error, 3 numeric failure, 4 training
divergence, 5 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

log = logging.getLogger("treeguide")


class CheckpointMismatch(RuntimeError):
    pass


def _f(x) -> str:
    return format(float(x), ".17g")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _yaml(data: dict) -> str:
    import yaml
    return yaml.safe_dump(data, sort_keys=True)


# -- argument handling ---------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML/JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--subsample", action="store_true", default=None, help="train on single root-to-leaf paths")
    common.add_argument("--mc-samples", type=int, help="Monte Carlo samples per iteration")
    common.add_argument("--threads", type=int, help="CPU threads for the numeric backends")
    common.add_argument("--iterations", type=int, help="override training iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="treeguide", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("filter", parents=[common], help="run the backward filter and dump messages")
    sub.add_parser("train", parents=[common], help="train the neural residuals")
    s = sub.add_parser("sample", parents=[common], help="draw from a trained variational posterior")
    s.add_argument("--checkpoint", type=Path, help="checkpoint (default: OUT/checkpoint.npz)")
    s.add_argument("-n", type=int, help="number of samples (default from config)")
    s.add_argument("--raw", action="store_true", help="sample the raw guided proposal (no residual)")
    m = sub.add_parser("baseline-mcmc", parents=[common], help="pCN chains on the guided proposal")
    m.add_argument("--n-steps", type=int)
    m.add_argument("--rho", type=float)
    m.add_argument("--chains", type=int)
    e = sub.add_parser("experiment", parents=[common], help="run a named scenario end-to-end")
    e.add_argument("name", nargs="?", choices=["linear_gaussian", "ou_tree", "double_well", "kunita_shapes"])
    return p


def _set_threads(n: int | None) -> None:
    if not n:
        return
    os.environ["OMP_NUM_THREADS"] = str(n)
    os.environ["OPENBLAS_NUM_THREADS"] = str(n)
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = (flags + f" --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'}"
                               f" intra_op_parallelism_threads={n}").strip()


def _resolve_config(args):
    from .config import ConfigError, default_config, load_config
    if args.config is not None:
        cfg = load_config(args.config)
        if getattr(args, "name", None) and args.name != cfg.experiment:
            raise ConfigError(f"{args.config}: experiment is {cfg.experiment!r}, not {args.name!r}")
    elif getattr(args, "name", None):
        cfg = default_config(args.name)
    else:
        raise ConfigError("--config is required")
    upd: dict = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.out is not None:
        upd["output_dir"] = str(args.out)
    train = {}
    if args.subsample:
        train["subsample"] = True
    if args.mc_samples is not None:
        train["mc_samples"] = args.mc_samples
    if args.iterations is not None:
        train["iterations"] = args.iterations
    if train:
        upd["train"] = cfg.train.model_copy(update=train)
    cfg = cfg.model_copy(update=upd)
    # re-validate after overrides
    from .config import ExperimentConfig
    return ExperimentConfig.model_validate(cfg.model_dump())


# -- commands ------------------------------------------------------------

def cmd_filter(cfg, out: Path) -> dict:
    from .exact import dump_marginals
    from .experiments import build_experiment
    from .filtering import dump_grids, dump_messages
    exp = build_experiment(cfg)
    filt = exp.filter
    _write(out / "messages.csv", dump_messages(filt))
    if filt.edge_grid:
        _write(out / "grids.csv", dump_grids(filt))
    summary = {"command": "filter", "experiment": cfg.experiment, "vertices": exp.tree.size,
               "continuous_edges": len(filt.edge_grid)}
    if exp.linear:
        post = exp.exact_posterior()
        _write(out / "exact_marginals.csv", dump_marginals(post))
        summary["J_star"] = float(-post.log_evidence)
    return summary


def _loss_trace(result) -> tuple[str, str]:
    a, b = io.StringIO(), io.StringIO()
    wa, wb = csv.writer(a, lineterminator="\n"), csv.writer(b, lineterminator="\n")
    wa.writerow(["iteration", "raw_loss", "moving_avg"])
    wb.writerow(["iteration", "wall_time"])
    for i, (x, m, t) in enumerate(zip(result.losses, result.moving_average, result.wall_time)):
        wa.writerow([i, _f(x), _f(m)])
        wb.writerow([i, _f(t)])
    return a.getvalue(), b.getvalue()


def cmd_train(cfg, out: Path) -> dict:
    from . import nn
    from .experiments import build_experiment
    exp = build_experiment(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    vt = exp.variational
    result = vt.train(exp.train_config(str(ckpt)), progress=True)
    trace, timing = _loss_trace(result)
    _write(out / "loss_trace.csv", trace)
    _write(out / "timing.log", timing)
    nn.save_checkpoint(ckpt, result.params, result.adam,
                       {"experiment": cfg.experiment, "iteration": len(result.losses)})
    window = cfg.train.window
    summary = {"command": "train", "experiment": cfg.experiment, "iterations": len(result.losses),
               "subsample": cfg.train.subsample}
    if len(result.losses):
        summary["J_bar"] = result.final_average(window)
    J = exp.lower_bound()
    if J is not None:
        summary["J_star"] = float(J)
        if len(result.losses):
            summary["relative_error"] = float((summary["J_bar"] - J) / abs(J))
    return summary


def _load_compatible(vt, path: Path, experiment: str):
    from . import nn
    try:
        params, _, meta = nn.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    if meta.get("experiment", experiment) != experiment:
        raise CheckpointMismatch(f"{path}: trained for {meta['experiment']!r}, config is {experiment!r}")
    ref = vt.init_params(0)
    if set(ref) != set(params):
        missing = sorted(set(ref) ^ set(params))[:5]
        raise CheckpointMismatch(f"{path}: parameter names differ from the configured network ({missing} ...)")
    for k in ref:
        if ref[k].shape != params[k].shape:
            raise CheckpointMismatch(f"{path}: tensor {k} has shape {params[k].shape}, expected {ref[k].shape}")
    return params


def dump_samples(states, paths, tree) -> tuple[str, str]:
    """Vertex scatter file and trajectory file (continuous edges only)."""
    import numpy as np
    d = tree.dim
    a = io.StringIO()
    w = csv.writer(a, lineterminator="\n")
    w.writerow(["sample_idx", "vertex_id"] + [f"x{i}" for i in range(d)])
    for k in range(states.shape[0]):
        for v in range(tree.size):
            w.writerow([k, v] + [_f(x) for x in states[k, v]])
    b = io.StringIO()
    w = csv.writer(b, lineterminator="\n")
    w.writerow(["sample_idx", "vertex_id", "t_local", "t_abs"] + [f"x{i}" for i in range(d)])
    start = {0: 0.0}
    for v in tree.pre_order()[1:]:
        start[v] = start[tree.parent[v]] + (tree.edge[v].duration or 0.0)
    for k in range(states.shape[0]):
        for v in tree.pre_order()[1:]:
            if v not in paths:
                continue
            dyn = tree.edge[v]
            ts = np.linspace(0.0, dyn.duration, dyn.num_steps + 1)
            t0 = start[v] - dyn.duration
            for t, z in zip(ts, paths[v][k]):
                w.writerow([k, v, _f(t), _f(t0 + t)] + [_f(x) for x in z])
    return a.getvalue(), b.getvalue()


def cmd_sample(cfg, out: Path, checkpoint: Path | None, n: int | None, raw: bool = False) -> dict:
    from .experiments import build_experiment
    exp = build_experiment(cfg)
    vt = exp.variational
    n = cfg.sample.n if n is None else n
    if raw:
        params = vt.init_params(cfg.seed)
    else:
        params = _load_compatible(vt, checkpoint or out / "checkpoint.npz", cfg.experiment)
    states, paths = vt.sample(params, cfg.seed, n, use_residual=not raw)
    vertex, traj = dump_samples(states, paths, exp.tree)
    tag = "raw_" if raw else ""
    _write(out / f"{tag}samples.csv", vertex)
    _write(out / f"{tag}trajectories.csv", traj)
    return {"command": "sample", "experiment": cfg.experiment, "n": n, "raw": raw}


def cmd_baseline_mcmc(cfg, out: Path, n_steps=None, rho=None, chains=None) -> dict:
    import numpy as np
    from .experiments import build_experiment
    from .mcmc import dump_chain_states, dump_chain_summary, run_chain
    exp = build_experiment(cfg)
    m = cfg.mcmc
    n_steps = m.n_steps if n_steps is None else n_steps
    rho = m.rho if rho is None else rho
    chains = m.chains if chains is None else chains
    burn = min(m.burn_in, n_steps)
    results = []
    for c in range(chains):
        r = run_chain(exp.tree, exp.filter, exp.models, exp.obs, n_steps, rho, seed=[cfg.seed, c],
                      burn_in=burn, thin=m.thin)
        results.append(r)
        _write(out / f"chain_{c}.csv", dump_chain_states(r))
    _write(out / "chain_summary.csv", dump_chain_summary(results))
    summary = {"command": "baseline-mcmc", "experiment": cfg.experiment, "n_steps": n_steps, "rho": rho,
               "acceptance": [float(r.acceptance_rate) for r in results]}
    if exp.tree.dim == 1:
        summary["positive_fraction"] = [
            {int(v): float(np.mean(r.states[:, v, 0] > 0)) if len(r.states) else None
             for v in exp.tree.nonroot if not exp.tree.is_leaf(v)} for r in results]
    return summary


def cmd_experiment(cfg, out: Path) -> dict:
    summary = {"filter": cmd_filter(cfg, out), "train": cmd_train(cfg, out)}
    summary["sample"] = cmd_sample(cfg, out, None, None)
    summary["raw_sample"] = cmd_sample(cfg, out, None, None, raw=True)
    if cfg.experiment == "double_well":
        summary["mcmc"] = cmd_baseline_mcmc(cfg, out)
    return summary


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _set_threads(args.threads)
    import numpy as np
    from .config import ConfigError, dump_config
    from .training import TrainingDiverged
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "effective_config.yaml", dump_config(cfg))
        if args.command == "filter":
            summary = cmd_filter(cfg, out)
        elif args.command == "train":
            summary = cmd_train(cfg, out)
        elif args.command == "sample":
            summary = cmd_sample(cfg, out, args.checkpoint, args.n, args.raw)
        elif args.command == "baseline-mcmc":
            summary = cmd_baseline_mcmc(cfg, out, args.n_steps, args.rho, args.chains)
        else:
            summary = cmd_experiment(cfg, out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write(out / "summary.yaml", _yaml(summary))
    print(_yaml(summary), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
