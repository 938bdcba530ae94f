"""Training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

PHASES = ("coarse", "locnet", "e2e")

# per-phase defaults for the learning rates and epochs
PHASE_DEFAULTS = {
    "coarse": {"lr_new": 0.05, "lr_pretrained": 0.05, "epochs": 20},
    "locnet": {"lr_new": 0.01, "lr_pretrained": 0.01, "epochs": 30},
    "e2e": {"lr_new": 0.01, "lr_pretrained": 0.001, "epochs": 20},
}


class ConfigError(ValueError):
    pass


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, str):
        return tuple(int(x) for x in v.replace(",", " ").split())
    return tuple(int(x) for x in v)


@dataclass
class TrainConfig:
    phase: str = "coarse"
    epochs: int = 0  # 0 -> phase default
    batch_size: int = 8
    lr_new: float = 0.0  # 0 -> phase default
    lr_pretrained: float = 0.0
    momentum: float = 0.9
    seed: int = 0
    data: str = ""
    out: str = ""
    coarse_ckpt: str = ""
    loc_ckpt: str = ""
    fine_ckpt: str = ""
    resume: str = ""
    window: int = 81
    input_size: int = 128
    canvas: int = 0  # 0 -> largest padded sample
    coarse_widths: tuple = (24, 32, 40, 48)
    coarse_rounds: int = 3
    coarse_fuse: int = 0  # 0 -> first branch width
    fine_widths: tuple = (24, 32, 40, 48)
    fine_rounds: int = 3
    fine_fuse: int = 0
    loc_widths: tuple = (16, 16, 32, 32, 64, 64, 96, 96)
    loc_input: str = "sigmoid"
    augment: bool = True
    occlusion_prob: float = 0.0
    freeze_stn: bool = False
    f1_every: int = 0
    max_grad_norm: float = 0.0  # 0 -> no clipping

    def __post_init__(self):
        self.coarse_widths = _ints(self.coarse_widths)
        self.fine_widths = _ints(self.fine_widths)
        self.loc_widths = _ints(self.loc_widths)
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        d = PHASE_DEFAULTS[self.phase]
        if not self.epochs:
            self.epochs = d["epochs"]
        if not self.lr_new:
            self.lr_new = d["lr_new"]
        if not self.lr_pretrained:
            self.lr_pretrained = d["lr_pretrained"]
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_pretrained > self.lr_new:
            raise ConfigError("lr_pretrained must not exceed lr_new")
        if self.window < 1:
            raise ConfigError("window must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in ("coarse_widths", "fine_widths", "loc_widths"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(names[k], v)
        return cls(**kw)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        if kw.get("phase") not in (None, self.phase):
            # phase-dependent defaults are re-resolved for the new phase
            for k in ("epochs", "lr_new", "lr_pretrained"):
                d[k] = 0
        d.update({k: v for k, v in kw.items() if v is not None})
        return TrainConfig.from_dict(d)


def _coerce(f: dataclasses.Field, v):
    default = f.default
    if isinstance(default, bool):
        if isinstance(v, str):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{f.name}: not a boolean: {v!r}")
        return bool(v)
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        return _ints(v)
    return str(v)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines (``#`` comments) into a flat dict of strings."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"config file: {e}") from None
    return dict(cp["config"])


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def format_config(d: dict) -> str:
    lines = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
