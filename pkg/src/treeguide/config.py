"""Experiment configuration: schema, loading with diagnostics, round-trip dump."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .models import PAPER_OU


class ConfigError(ValueError):
    """Schema or syntax problem; ``str()`` carries field paths and line numbers."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    mc_samples: int = Field(50, ge=1)
    iterations: int = Field(5000, ge=0)
    lr: float = Field(1e-3, gt=0)
    clip_norm: Optional[float] = 1.0
    subsample: bool = False
    window: int = Field(500, ge=1)
    divergence_threshold: float = 1e6
    checkpoint_every: int = Field(0, ge=0)


class NetSection(_Strict):
    embed_dim: Optional[int] = None
    time_embed_dim: int = 32
    score_hidden: list[int] = [64, 64, 64, 64]
    flow_layers: int = 4
    flow_hidden: Optional[list[int]] = None


class McmcSection(_Strict):
    n_steps: int = Field(10000, ge=0)
    rho: float = Field(0.1, ge=0.0, le=1.0)
    chains: int = Field(2, ge=1)
    burn_in: int = Field(1000, ge=0)
    thin: int = Field(10, ge=1)


class SampleSection(_Strict):
    n: int = Field(500, ge=0)


class LinearGaussianParams(_Strict):
    dim: int = Field(2, ge=1)
    depth: int = Field(4, ge=1)
    branch: int = Field(3, ge=1)
    obs_var: float = Field(1e-3, gt=0)
    final_variance: float = Field(0.9, gt=0, lt=1)
    aux: Literal["misspecified", "exact"] = "misspecified"


class OuTreeParams(_Strict):
    budget: int = Field(40, ge=2)
    branch_prob: float = 0.5
    tree_seed: int = 6669
    data_seed: int = 0
    num_steps: int = Field(50, ge=1)
    obs_var: float = Field(1e-3, gt=0)
    alpha: list[list[float]] = PAPER_OU["alpha_mat"]
    theta: list[float] = PAPER_OU["Theta"]
    sigma: list[list[float]] = PAPER_OU["sigma_mat"]
    root: Optional[list[float]] = None
    aux: Literal["brownian", "exact"] = "brownian"


class DoubleWellParams(_Strict):
    alpha: float = Field(3.0, gt=0)
    sigma: float = Field(0.5, gt=0)
    obs_var: float = Field(0.01, gt=0)
    y: list[float] = [-1.0, -1.0, 1.0, 1.0]
    internal_duration: float = Field(4.0, gt=0)
    leaf_duration: float = Field(1.0, gt=0)
    num_steps: int = Field(200, ge=1)
    root: float = 0.0

    @model_validator(mode="after")
    def _four_leaves(self):
        if len(self.y) != 4:
            raise ValueError("y must hold exactly four leaf observations")
        return self


class KunitaParams(_Strict):
    alpha: float = Field(0.05, gt=0)
    sigma: float = Field(0.2, gt=0)
    obs_std: float = Field(0.05, gt=0)
    num_landmarks: int = Field(8, ge=3)
    num_steps: int = Field(10, ge=1)
    eccentricity_noise: float = Field(0.15, ge=0)
    data_seed: int = 0


_PARAMS = {"linear_gaussian": LinearGaussianParams, "ou_tree": OuTreeParams,
           "double_well": DoubleWellParams, "kunita_shapes": KunitaParams}

ParamsUnion = Union[LinearGaussianParams, OuTreeParams, DoubleWellParams, KunitaParams]


class ExperimentConfig(_Strict):
    experiment: Literal["linear_gaussian", "ou_tree", "double_well", "kunita_shapes"]
    seed: int = 0
    output_dir: str = "out"
    params: ParamsUnion
    train: TrainSection = TrainSection()
    net: NetSection = NetSection()
    mcmc: McmcSection = McmcSection()
    sample: SampleSection = SampleSection()

    @model_validator(mode="before")
    @classmethod
    def _dispatch_params(cls, data):
        if isinstance(data, dict) and data.get("experiment") in _PARAMS:
            raw = data.get("params") or {}
            if isinstance(raw, dict):
                data = dict(data)
                data["params"] = _PARAMS[data["experiment"]].model_validate(raw)
        return data


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Defaults tuned per experiment (network sizes, iteration counts)."""
    base: dict = {"experiment": experiment, "params": {}}
    if experiment == "double_well":
        base["train"] = {"iterations": 10000, "subsample": True}
        base["net"] = {"score_hidden": [64] * 5}
    elif experiment == "kunita_shapes":
        base["train"] = {"iterations": 2000, "lr": 1e-4, "mc_samples": 10}
        base["net"] = {"score_hidden": [128, 128, 128]}
        base["sample"] = {"n": 100}
    base.update(overrides)
    return ExperimentConfig.model_validate(base)


def _key_lines(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based line numbers in a YAML/JSON document."""
    out: dict[tuple, int] = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                p = path + (i,)
                out[p] = v.start_mark.line + 1
                walk(v, p)
    if node is not None:
        walk(node, ())
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{source}:{where} {getattr(exc, 'problem', None) or exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    errors = []
    exp = data.get("experiment")
    if exp in _PARAMS:
        raw = data.get("params") or {}
        try:
            params = _PARAMS[exp].model_validate(raw)
        except ValidationError as exc:
            errors += [dict(e, loc=("params",) + tuple(e["loc"])) for e in exc.errors()]
            params = _PARAMS[exp]()
        data = {**data, "params": params}
    cfg = None
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        errors += exc.errors()
    if not errors:
        return cfg
    lines = _key_lines(text)
    msgs = []
    for err in errors:
        loc = tuple(err["loc"])
        line = None
        for k in range(len(loc), 0, -1):
            if loc[:k] in lines:
                line = lines[loc[:k]]
                break
        where = f"line {line}: " if line else ""
        msgs.append(f"{source}: {where}{'.'.join(map(str, loc)) or '<root>'}: {err['msg']}")
    raise ConfigError("\n".join(msgs))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective config with every default resolved; re-ingestable by ``parse_config``."""
    return yaml.safe_dump(json.loads(cfg.model_dump_json()), sort_keys=True)
