"""Line-oriented key=value run configuration.

Zero-dependency and diffable: one `key=value` per line, `#` comments,
unknown keys rejected, every value validated at parse time.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .distill import DistillConfig
from .models import FILTER_MODES, SURGERY_MODES, ArchSpec

DATASET_KINDS = ("cifar10", "cifar100", "svhn", "custom")
AUGMENT_CHOICES = ("auto", "on", "off")


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 2)."""


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_milestones(v: str) -> tuple:
    v = v.strip()
    if not v:
        return ()
    try:
        return tuple(int(x) for x in v.split(","))
    except ValueError as e:
        raise ConfigError(f"milestones must be comma-separated ints: {v!r}") from e


@dataclass
class RunConfig:
    """Everything a training or inference command needs, resolved."""

    arch: str = "tiny6"
    num_classes: int = 10
    filter_mode: str = "teacher"
    surgery: str = "keep-edges"
    dataset_kind: str = "custom"
    train_data: str = ""
    test_data: str = ""
    seed: int | None = None
    augment: str = "auto"
    tau: float = 4.0
    alpha: float = 0.9
    rho: float = 1.0
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.1
    milestones: tuple = (60, 120, 160)
    factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    tau_square_scaling: bool = True
    pacemaker_mode: str = "ensemble"
    ensemble_average: str = "logits"
    phase1_feature_loss: bool = True
    phase1_joint: bool = True

    def validate(self) -> "RunConfig":
        try:
            ArchSpec.parse(self.arch, self.num_classes)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.filter_mode not in FILTER_MODES:
            raise ConfigError(f"filter_mode must be one of {FILTER_MODES}")
        if self.surgery not in SURGERY_MODES:
            raise ConfigError(f"surgery must be one of {SURGERY_MODES}")
        if self.dataset_kind not in DATASET_KINDS:
            raise ConfigError(f"dataset_kind must be one of {DATASET_KINDS}")
        if self.augment not in AUGMENT_CHOICES:
            raise ConfigError(f"augment must be one of {AUGMENT_CHOICES}")
        try:
            self.distill_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def arch_spec(self) -> ArchSpec:
        return ArchSpec.parse(self.arch, self.num_classes)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            tau=self.tau, alpha=self.alpha, rho=self.rho, epochs=self.epochs,
            batch_size=self.batch_size, base_lr=self.base_lr,
            milestones=self.milestones, factor=self.factor,
            momentum=self.momentum, weight_decay=self.weight_decay,
            tau_square_scaling=self.tau_square_scaling,
            pacemaker_mode=self.pacemaker_mode,
            ensemble_average=self.ensemble_average,
            phase1_feature_loss=self.phase1_feature_loss,
            phase1_joint=self.phase1_joint,
        ).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "milestones":
                v = ",".join(str(m) for m in v)
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    int: int,
    float: float,
    str: str,
}


def _field_types():
    out = {}
    for f in fields(RunConfig):
        if f.name == "milestones":
            out[f.name] = _parse_milestones
        elif f.name == "seed":
            out[f.name] = lambda v: int(v) if v.strip() else None
        elif f.type in ("bool",):
            out[f.name] = _parse_bool
        elif f.type in ("int",):
            out[f.name] = int
        elif f.type in ("float",):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


_FIELD_PARSERS = _field_types()


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Set key=value pairs onto a config, with type parsing and rejection
    of unknown keys."""
    for key, value in overrides.items():
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"unknown config key {key!r}; known keys: "
                              f"{', '.join(sorted(_FIELD_PARSERS))}")
        try:
            parsed = _FIELD_PARSERS[key](value) if isinstance(value, str) \
                else value
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})") from e
        setattr(cfg, key, parsed)
    return cfg


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File first, then explicit overrides; validated as a whole."""
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
