"""Bundles the discriminative encoder, the trilinear bridge, the positional
encoding, and the generative field heads into one model object used by both
training and inference. The unconditioned variant (no encoder, no embedding)
is the per-scene sine-network baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .comnet import ComNetConfig, ComNetOutput, comnet_forward, init_comnet_params, validate_extent
from .errors import ConfigError
from .generator import MlpSpec, gen_forward, semantic_forward, siren_init
from .sampling import (ShapeEmbeddingVolume, embedding_volume, encoding_dim,
                       nearest_sample, positional_encode,
                       positional_encode_jacobian, trilinear_dx,
                       trilinear_sample)
from .scenes import UNIT_BOUNDS
from .sparse import SparseTensor, voxelize


@dataclass(frozen=True)
class ModelConfig:
    grid_extent: tuple = (64, 64, 16)
    input_features: str = "occupancy"
    conditioned: bool = True
    comnet: ComNetConfig = field(default_factory=ComNetConfig)
    enc_levels: int = 10
    enc_include_xyz: bool = True
    gen_width: int = 128
    gen_depth: int = 4
    gen_activation: str = "sine"
    gen_omega0: float = 30.0
    sample_mode: str = "trilinear"        # or "nearest"
    derivative_mode: str = "total"        # or "embedding_fixed"
    num_classes: int = 0                  # 0 disables the semantic head

    @property
    def d_se(self):
        return self.comnet.d_se if self.conditioned else 0

    @property
    def gen_in_dim(self):
        return encoding_dim(self.enc_levels, self.enc_include_xyz) + self.d_se

    def gen_spec(self, out_dim=1):
        return MlpSpec(width=self.gen_width, depth=self.gen_depth,
                       in_dim=self.gen_in_dim, out_dim=out_dim,
                       activation=self.gen_activation, omega0=self.gen_omega0)

    def validate(self):
        if self.sample_mode not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")
        if self.derivative_mode not in ("total", "embedding_fixed"):
            raise ConfigError(f"unknown derivative_mode {self.derivative_mode!r}")
        if self.gen_in_dim <= 0:
            raise ConfigError("generator input dimension is zero; enable the "
                              "encoding or the embedding")
        if self.conditioned:
            validate_extent(self.comnet, self.grid_extent)


@dataclass
class FieldEval:
    sdf: object                 # (P,) Value or ndarray
    grad: object = None         # (P, 3)
    sem_logits: object = None   # (P, C)
    embedding: object = None    # (P, d_se)


class FieldModel:
    """Parameters plus configuration; all methods are pure given params."""

    def __init__(self, cfg: ModelConfig, params: dict):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ModelConfig, seed=0) -> "FieldModel":
        cfg.validate()
        ss = np.random.SeedSequence(seed).spawn(3)
        params = {}
        if cfg.conditioned:
            params.update(init_comnet_params(cfg.comnet, seed=ss[0]))
        params.update(siren_init(cfg.gen_spec(), seed=ss[1], prefix="gen"))
        if cfg.num_classes:
            params.update(siren_init(cfg.gen_spec(out_dim=cfg.num_classes),
                                     seed=ss[2], prefix="sem"))
        return cls(cfg, params)

    def lift(self, tape: ad.Tape) -> dict:
        """Wrap every parameter array as a leaf Value on the tape."""
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def voxelize_input(self, points, origin=None) -> SparseTensor:
        return voxelize(points, self.cfg.grid_extent, UNIT_BOUNDS,
                        feature_mode=self.cfg.input_features, origin=origin)

    def embed(self, params, occ: SparseTensor, targets=None, teacher_force=False):
        """Run the encoder; returns (volume, encoder output) or (None, None)."""
        if not self.cfg.conditioned:
            return None, None
        out: ComNetOutput = comnet_forward(occ, self.cfg.comnet, params,
                                           targets=targets,
                                           teacher_force=teacher_force)
        return embedding_volume(out.se, UNIT_BOUNDS), out

    def field(self, params, x, volume: ShapeEmbeddingVolume | None,
              want_grad=True, want_sem=False) -> FieldEval:
        """Evaluate the composite field (and gradient / class logits) at x."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        y = positional_encode(x, cfg.enc_levels, cfg.enc_include_xyz)
        e = None
        de_dx = None
        if cfg.conditioned:
            if volume is None:
                raise ValueError("conditioned model needs an embedding volume")
            if cfg.sample_mode == "trilinear":
                e, record = trilinear_sample(x, volume)
                if want_grad and cfg.derivative_mode == "total":
                    de_dx = trilinear_dx(volume, record)
            else:
                e, _ = nearest_sample(x, volume)
        j_enc = positional_encode_jacobian(x, cfg.enc_levels, cfg.enc_include_xyz) \
            if want_grad else None
        sdf, grad = gen_forward(params, y, e, cfg.gen_spec(), j_enc=j_enc,
                                de_dx=de_dx, want_grad=want_grad, prefix="gen")
        sem = None
        if want_sem:
            if not cfg.num_classes:
                raise ConfigError("semantic head not configured")
            sem = semantic_forward(params, y, e, cfg.gen_spec(out_dim=cfg.num_classes),
                                   prefix="sem")
        return FieldEval(sdf=sdf, grad=grad, sem_logits=sem, embedding=e)
