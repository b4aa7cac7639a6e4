"""Run configuration: a single versioned JSON document with documented
defaults for every field, strict unknown-key rejection, and a stable hash
for manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict

from .agent import Hyperparameters
from .simulator import SimParams


class ConfigError(ValueError):
    """Configuration file is unreadable or structurally invalid."""


CONFIG_VERSION = 1


@dataclass
class EvalSettings:
    """Evaluation knobs; zero-dose epsilons are a fraction of each cap."""

    n_bins: int = 20
    min_bin_count: int = 10
    epsilon_frac: float = 0.02
    folds: int = 0               # >0 runs the cross-validation envelope
    fold_epochs: int = 2500      # shorter schedule for per-fold training
    eval_seed: int = 0           # candidate-sampling seed for recommendations
    sim_oracles: bool = True     # Monte-Carlo return + extrapolation error
    mc_rollouts: int = 200
    extrap_states: int = 50
    extrap_rollouts: int = 40


@dataclass
class RunConfig:
    """Everything a pipeline command needs, with deterministic defaults.

    `seed` is the master seed: the simulator uses it directly (test split
    uses seed+1) and the trainer inherits it unless the config sets
    hyper.seed explicitly.
    """

    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "out"
    train_csv: str = ""          # defaults to <output_dir>/train.csv
    test_csv: str = ""           # defaults to <output_dir>/test.csv
    checkpoint: str = ""         # defaults to <output_dir>/agent.bxp
    n_train_patients: int = 2000
    n_test_patients: int = 500
    sim: SimParams = field(default_factory=SimParams)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def resolved_train_csv(self) -> str:
        return self.train_csv or f"{self.output_dir}/train.csv"

    def resolved_test_csv(self) -> str:
        return self.test_csv or f"{self.output_dir}/test.csv"

    def resolved_checkpoint(self) -> str:
        return self.checkpoint or f"{self.output_dir}/agent.bxp"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return data


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    sim_data = data.pop("sim", {})
    hyper_data = data.pop("hyper", {})
    eval_data = data.pop("eval", {})
    _build(RunConfig, data, "config")
    _build(SimParams, sim_data, "config.sim")
    _build(Hyperparameters, hyper_data, "config.hyper")
    _build(EvalSettings, eval_data, "config.eval")
    try:
        sim = SimParams.from_dict(sim_data)
        hyper = Hyperparameters(**hyper_data)
        ev = EvalSettings(**eval_data)
        cfg = RunConfig(**data, sim=sim, hyper=hyper, eval=ev)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    if "seed" not in hyper_data:
        cfg.hyper.seed = cfg.seed
    try:
        cfg.hyper.validate()
    except ValueError as exc:
        raise ConfigError(f"config.hyper: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a config file; JSON syntax errors carry the
    line/column position."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    return parse_config(data)
