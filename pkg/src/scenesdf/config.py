"""Flat plain-text key=value run configuration with presets.

Precedence: preset defaults < config file < --set overrides. The canonical
dump (sorted keys) is hashed into run manifests so identical configurations
are byte-identical across runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .comnet import ComNetConfig
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # voxel grid over the normalized scene box
    grid_extent: tuple = (64, 64, 16)
    input_features: str = "occupancy"   # occupancy | radial | radial_height
    # discriminative encoder
    conditioned: bool = True
    com_tiers: int = 4
    com_channels: tuple = (8, 16, 32, 64)
    com_dse: int = 32
    com_b: int = 4
    com_activation: str = "elu"
    com_output_convs: int = 2
    com_pruning: str = "all"
    com_bias: bool = True
    teacher_force_epochs: int = 1
    # positional encoding
    enc_levels: int = 10
    enc_include_xyz: bool = True
    # generative field
    gen_width: int = 128
    gen_depth: int = 4
    gen_activation: str = "sine"
    gen_omega0: float = 30.0
    sample_mode: str = "trilinear"      # trilinear | nearest
    derivative_mode: str = "total"      # total | embedding_fixed
    # semantic head
    ssc: bool = False
    num_classes: int = 6
    # optimization
    epochs: int = 40
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_on: int = 2048
    n_off: int = 2048
    sample_strategy: str = "random"     # random | prior
    augment_rotate: bool = True
    lambda1: float = 3000.0
    lambda2: float = 100.0
    lambda3: float = 100.0
    lambda4: float = 50.0
    lambda5: float = 100.0
    lambda6: float = 50.0
    psi_alpha: float = 100.0
    eval_every: int = 10
    # inference
    n_inf: int = 64
    v_th: float = 0.0                   # <= 0 selects by sweep
    sweep_lo: float = 0.002
    sweep_hi: float = 0.2
    sweep_steps: int = 25


PRESETS = {
    "desk": {},
    "paper": {
        "grid_extent": (256, 256, 32),
        "com_tiers": 6,
        "com_channels": (16, 32, 64, 128, 256, 512),
        "com_dse": 256,
        "com_b": 4,
        "gen_width": 256,
        "gen_depth": 4,
        "n_on": 16000,
        "n_off": 16000,
        "n_inf": 256,
    },
}


def _coerce(name, default, raw):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def parse_kv_text(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(preset=None, path=None, sets=()) -> RunConfig:
    """Assemble a RunConfig from a preset, an optional file, and overrides."""
    raw = {}
    if path is not None:
        with open(path) as f:
            raw.update(parse_kv_text(f.read()))
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    preset = preset or raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = replace(RunConfig(preset=preset), **PRESETS[preset])
    valid = {f.name for f in fields(RunConfig)}
    for key, val in raw.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "preset":
            continue
        cfg = replace(cfg, **{key: _coerce(key, getattr(cfg, key), val)})
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if cfg.lr <= 0:
        raise ConfigError("learning rate must be positive")
    if min(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4, cfg.lambda5) < 0:
        raise ConfigError("loss weights must be non-negative")
    if cfg.psi_alpha <= 0:
        raise ConfigError("psi_alpha must be positive")
    if len(cfg.com_channels) != cfg.com_tiers:
        raise ConfigError("com_channels length must equal com_tiers")
    if cfg.n_on < 1 or cfg.n_off < 1:
        raise ConfigError("point counts must be positive")
    model_config(cfg).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = f"{v:.10g}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def model_config(cfg: RunConfig) -> ModelConfig:
    in_channels = {"occupancy": 1, "radial": 1, "radial_height": 2}.get(cfg.input_features)
    if in_channels is None:
        raise ConfigError(f"unknown input_features {cfg.input_features!r}")
    comnet = ComNetConfig(tiers=cfg.com_tiers, channels=tuple(cfg.com_channels),
                          in_channels=in_channels, d_se=cfg.com_dse, b=cfg.com_b,
                          activation=cfg.com_activation,
                          output_convs=cfg.com_output_convs,
                          pruning=cfg.com_pruning, bias=cfg.com_bias)
    return ModelConfig(grid_extent=tuple(cfg.grid_extent),
                       input_features=cfg.input_features,
                       conditioned=cfg.conditioned, comnet=comnet,
                       enc_levels=cfg.enc_levels,
                       enc_include_xyz=cfg.enc_include_xyz,
                       gen_width=cfg.gen_width, gen_depth=cfg.gen_depth,
                       gen_activation=cfg.gen_activation,
                       gen_omega0=cfg.gen_omega0, sample_mode=cfg.sample_mode,
                       derivative_mode=cfg.derivative_mode,
                       num_classes=cfg.num_classes if cfg.ssc else 0)


def replace_config(cfg: RunConfig, **kw) -> RunConfig:
    out = replace(cfg, **kw)
    validate_config(out)
    return out


def sweep_thresholds(cfg: RunConfig):
    import numpy as np
    return np.geomspace(cfg.sweep_lo, cfg.sweep_hi, cfg.sweep_steps)
