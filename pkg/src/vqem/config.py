"""Flat ``key = value`` run configuration. Unknown keys and bad values are errors."""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .nn import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = "synthetic"
    data_n: int = 4096
    data_seed: int = 0
    standardize: bool = False
    log_every: int = 50
    checkpoint_every: int = 0
    wall_clock: bool = True
    # "data": sample K rows of the first encoded batch; "tight": Gaussian ball of
    # radius init_radius around (first-batch mean + init_offset)
    codebook_init: str = "data"
    init_radius: float = 0.01
    init_offset: float = 0.0
    usage_eval: str = "batch"
    modes: list[str] = field(default_factory=lambda: ["hard_ema", "soft_em:m=5", "soft_em:m=10"])
    collapse_fraction: float = 0.1
    eval_split: float = 0.8
    prior_order: int = 2
    prior_alpha: float = 0.1
    max_iters: int = 100

    def problems(self) -> list[str]:
        out = []
        if self.data_n < 1:
            out.append("data_n must be >= 1")
        if self.log_every < 1:
            out.append("log_every must be >= 1")
        if self.checkpoint_every < 0:
            out.append("checkpoint_every must be >= 0")
        if self.codebook_init not in ("data", "tight"):
            out.append("codebook_init must be 'data' or 'tight'")
        if self.usage_eval not in ("batch", "full"):
            out.append("usage_eval must be 'batch' or 'full'")
        if self.init_radius < 0:
            out.append("init_radius must be >= 0")
        if not 0 < self.collapse_fraction <= 1:
            out.append("collapse_fraction must lie in (0, 1]")
        if not 0 < self.eval_split < 1:
            out.append("eval_split must lie in (0, 1)")
        if self.prior_order < 1:
            out.append("prior_order must be >= 1")
        if self.prior_alpha < 0:
            out.append("prior_alpha must be >= 0")
        if self.max_iters < 1:
            out.append("max_iters must be >= 1")
        for mode in self.modes:
            try:
                parse_mode(mode)
            except ValueError as exc:
                out.append(str(exc))
        return out

    def to_dict(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k != "train"}
        flat.update(asdict(self.train))
        return flat


def parse_mode(spec: str) -> tuple[str, int | None]:
    """``hard_ema`` or ``soft_em:m=10`` -> (mode, m)."""
    spec = spec.strip()
    if spec == "hard_ema":
        return "hard_ema", None
    if spec == "soft_em":
        return "soft_em", None
    if spec.startswith("soft_em:m="):
        try:
            m = int(spec[len("soft_em:m="):])
        except ValueError:
            raise ValueError(f"bad mode {spec!r}") from None
        if m < 1:
            raise ValueError(f"bad mode {spec!r}: m must be >= 1")
        return "soft_em", m
    raise ValueError(f"bad mode {spec!r}")


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
_RUN_HINTS = typing.get_type_hints(RunConfig)
_TRAIN_HINTS = typing.get_type_hints(TrainConfig)


def _convert(raw: str, hint):
    if hint is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    if typing.get_origin(hint) is list:
        return [item.strip() for item in raw.split(",") if item.strip()]
    raise TypeError(f"unsupported config type {hint}")


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text. Every problem is collected before raising :class:`ConfigError`."""
    problems: list[str] = []
    train_values: dict = {}
    run_values: dict = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        if key in _TRAIN_FIELDS:
            target, hint = train_values, _TRAIN_HINTS[key]
        elif key in _RUN_FIELDS:
            target, hint = run_values, _RUN_HINTS[key]
        else:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            target[key] = _convert(raw, hint)
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    for key, value in (overrides or {}).items():
        if key in _TRAIN_FIELDS:
            train_values[key] = value
        elif key in _RUN_FIELDS:
            run_values[key] = value
        else:
            problems.append(f"override: unknown key {key!r}")

    # semantic checks run even after syntax errors so one report lists every bad key
    train = TrainConfig.__new__(TrainConfig)
    for name, f in _TRAIN_FIELDS.items():
        setattr(train, name, train_values.get(name, f.default))
    problems.extend(train.problems())
    cfg = RunConfig(train=train, **run_values)
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_config(text, overrides)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
