"""Run configuration: nested dataclasses loaded from YAML presets.

Unknown keys are rejected at every level so a typo fails before any compute.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    t_late: float = 0.002
    bias_spike: bool = True
    bias_time: float = 0.0
    r_small: float = 0.1
    r_big: float = 0.5
    mnist_dir: str = "data/mnist"
    dropout: float = 0.0
    jitter: float = 0.0
    nu0_batches: int = 10


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [50])
    use_delays: list = field(default_factory=lambda: [False, False])
    s_max: list = field(default_factory=lambda: [6])
    chunk_size: int = 128
    engine: str = "parallel"
    scan_method: str = "sklansky"


@dataclass
class LifConfig:
    tau_s: float = 0.0005
    tau_m: float = 0.002
    v_th: float = 1.0
    v_reset: float = 0.0


@dataclass
class ReadoutConfig:
    tau_li: float = 0.01
    tau_max: float = 0.02
    temperature: float = 20.0


@dataclass
class InitConfig:
    alpha_mu: float = 0.8
    alpha_sigma: float = 0.8
    delay_init: float = 0.1
    beta_sp: float = 5.0


@dataclass
class OptimConfig:
    schedule: str = "cosine"
    lr: float = 0.02
    lr_end: float = 1e-4
    warmup: int = 2000
    decay_steps: int = 6000
    decay_rate: float = 0.95
    delay_lr: float = 0.02
    delay_lr_end: float = 1e-4


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 128
    patience: int | None = None
    bump_steps: int = 2
    bump_value: float = 0.02
    c_target: float = 3.0
    lambda_reg: float = 1e-5
    max_missing: float = 0.0


@dataclass
class SolverSection:
    method: str = "newton"
    max_iters: int = 14
    deriv_floor: float = 0.01


@dataclass
class SweepConfig:
    delta_ts: list = field(default_factory=lambda: [0.0, 0.0001, 0.00025, 0.0005, 0.001, 0.002, 0.005])
    seeds: int = 5
    epochs: int | None = None


@dataclass
class BenchConfig:
    hidden: list = field(default_factory=lambda: [128, 256])
    batch: list = field(default_factory=lambda: [32, 64])
    chunk: list = field(default_factory=lambda: [128])
    n_inputs: int = 16
    events_per_neuron: int = 2000
    duration: float = 0.2
    warmup: int = 5
    batches: int = 100
    modes: list = field(default_factory=lambda: ["serial", "parallel"])
    scaling_counts: list = field(default_factory=lambda: [250, 500, 1000, 1500, 2000])
    scaling_repeats: int = 5


@dataclass
class RunConfig:
    dataset: str = "yinyang"
    seed: int = 0
    float32: bool = False
    deterministic: bool = False
    workers: int = 1
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lif: LifConfig = field(default_factory=LifConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    init: InitConfig = field(default_factory=InitConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    solver: SolverSection = field(default_factory=SolverSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "RunConfig":
        if self.dataset not in ("yinyang", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        m = self.model
        if len(m.s_max) != len(m.hidden):
            raise ConfigError("model.s_max needs one entry per hidden layer")
        if len(m.use_delays) != len(m.hidden) + 1:
            raise ConfigError("model.use_delays needs one entry per projection (hidden + readout)")
        if m.engine not in ("parallel", "serial"):
            raise ConfigError(f"unknown engine {m.engine!r}")
        if m.chunk_size < 1 or min(m.hidden, default=1) < 1 or min(m.s_max, default=1) < 1:
            raise ConfigError("chunk size, layer sizes and spike caps must be positive")
        if self.optim.schedule not in ("cosine", "exponential", "constant"):
            raise ConfigError(f"unknown schedule {self.optim.schedule!r}")
        if self.solver.method not in ("newton", "bisection"):
            raise ConfigError(f"unknown solver {self.solver.method!r}")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.data.dropout < 1 or self.data.jitter < 0:
            raise ConfigError("need 0 <= dropout < 1 and jitter >= 0")
        if self.lif.tau_m == self.lif.tau_s or min(self.lif.tau_m, self.lif.tau_s) <= 0:
            raise ConfigError("time constants must be positive and distinct")
        if any(d < 0 for d in self.sweep.delta_ts):
            raise ConfigError("sweep.delta_ts must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for key, val in raw.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, val, where)
        else:
            kwargs[key] = _coerce(hint, val, where)
    return cls(**kwargs)


def _coerce(hint, val, where):
    if val is None:
        if type(None) in typing.get_args(hint):
            return None
        raise ConfigError(f"{where}: null not allowed")
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint)
    if base is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{where}: expected true/false")
        return val
    if base is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where}: expected an integer")
        return val
    if base is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(val)
    if base is str:
        if not isinstance(val, str):
            raise ConfigError(f"{where}: expected a string")
        return val
    if base is list:
        if not isinstance(val, list):
            raise ConfigError(f"{where}: expected a list")
        return list(val)
    return val


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(raw or {})


def load(path) -> RunConfig:
    """Load a YAML file, or a bundled preset by name ("yinyang", "mnist")."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return preset(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


PRESETS = ("yinyang", "mnist", "mnist_desk")


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("eventscan.presets").joinpath(f"{name}.yaml").read_text()
    return loads(text)
