"""Double-well diffusion on a binary tree, conditioned on leaves [-1, -1, 1, 1].

Prints how often each internal vertex lands in the well matching its
subtree, for the raw guided proposal, a pCN chain and the trained model.

    python demos/double_well.py [iterations]
"""
import sys

import numpy as np

from treeguide import build_experiment, default_config, run_chain

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = default_config("double_well", params={"num_steps": 50},
                     train={"iterations": iterations, "mc_samples": 8, "window": 50})
exp = build_experiment(cfg)
vt = exp.variational
internal = [v for v in exp.tree.nonroot if not exp.tree.is_leaf(v)]

raw, _ = vt.sample(vt.init_params(0), 0, 500, use_residual=False)
chain = run_chain(exp.tree, exp.filter, exp.models, exp.obs, 2000, rho=0.1, seed=0, burn_in=200, thin=5)
result = vt.train(exp.train_config())
trained, _ = vt.sample(result.params, 0, 500)

print(f"pCN acceptance {chain.acceptance_rate:.2f}")
for name, s in (("raw", raw), ("pcn", chain.states), ("trained", trained)):
    frac = {v: round(float(np.mean(s[:, v, 0] > 0)), 2) for v in internal}
    print(f"{name:8s} fraction in the positive well per internal vertex: {frac}")
