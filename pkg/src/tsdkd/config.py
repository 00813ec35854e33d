"""Training configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidParameterError
from .losses import ObjectiveConfig

OBJECTIVES = ("tsd_kd", "forward_kl", "reverse_kl", "gkd_jsd", "sequence_ce")


class ConfigError(InvalidParameterError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class TrainConfig:
    # objective
    objective: str = "tsd_kd"
    alpha: float = 0.1
    beta: float = 0.9
    tau: float = 1.0
    top_k: int = 10
    coverage: float = 10.0
    adaptive: bool = False
    em_fraction: float = 0.1
    on_policy: bool = True
    temperature: float = 1.0
    max_len: int = 64
    # optimisation
    steps: int = 400
    batch_size: int = 32
    lr: float = 3e-4
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 200
    seed: int = 0
    # task
    task: str = "addition"
    digits_lo: int = 2
    digits_hi: int = 3
    n_train: int = 20000
    n_eval: int = 200
    data_seed: int = 1234
    # models
    context: int = 96
    teacher_layers: int = 2
    teacher_d_model: int = 128
    teacher_heads: int = 4
    student_layers: int = 1
    student_d_model: int = 32
    student_heads: int = 2
    # supervised phases
    teacher_steps: int = 4000
    teacher_lr: float = 1e-3
    teacher_batch_size: int = 64
    teacher_threshold: float = 0.99
    teacher_eval_every: int = 250
    student_init_steps: int = 300
    student_init_lr: float = 1e-3
    # paths
    out_dir: str = "runs"
    teacher_path: str = ""
    student_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(self.objective in OBJECTIVES, "objective", f"must be one of {OBJECTIVES}")
        need(self.alpha >= 0, "alpha", "must be >= 0")
        need(0 < self.beta < 1, "beta", "must lie in (0, 1)")
        need(self.tau > 0, "tau", "must be > 0")
        need(self.top_k >= 2, "top_k", "must be >= 2")
        need(0 < self.coverage <= 100, "coverage", "must lie in (0, 100]")
        need(0 < self.em_fraction <= 1, "em_fraction", "must lie in (0, 1]")
        need(self.temperature > 0, "temperature", "must be > 0")
        need(self.max_len >= 1, "max_len", "must be >= 1")
        need(self.steps >= 0, "steps", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(0 <= self.warmup_ratio < 1, "warmup_ratio", "must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.grad_clip >= 0, "grad_clip", "must be >= 0 (0 disables clipping)")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(1 <= self.digits_lo <= self.digits_hi, "digits_lo", "need 1 <= digits_lo <= digits_hi")
        need(self.n_train >= 1, "n_train", "must be >= 1")
        need(self.n_eval >= 1, "n_eval", "must be >= 1")
        need(0 <= self.teacher_threshold <= 1, "teacher_threshold", "must lie in [0, 1]")
        need(self.teacher_steps >= 0, "teacher_steps", "must be >= 0")
        need(self.student_init_steps >= 0, "student_init_steps", "must be >= 0")
        for name in ("teacher_d_model", "student_d_model"):
            heads = getattr(self, name.replace("d_model", "heads"))
            need(heads >= 1 and getattr(self, name) % heads == 0, name, "must be divisible by heads")

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.alpha, self.beta, self.tau, self.top_k, self.coverage,
                               self.adaptive, self.em_fraction)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value) if not isinstance(value, float) else repr(value)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(lines, source: str = "<overrides>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def parse_config(path=None, overrides=()) -> TrainConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(list(overrides)))
    return TrainConfig(**values)
