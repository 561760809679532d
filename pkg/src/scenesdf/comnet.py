"""Discriminative shape-completion network: a multi-tier sparse
encoder/decoder with residual blocks, skip connections, generative
deconvolutions and learned voxel pruning, ending in an embedding head plus
cube average-pooling that yields the shape-embedding volume.

Tier t operates at stride 2^t; between scales the kernel/stride pair is
[2, 2], within a scale it is [3, 1]. Each encoder tier is a channel-raising
convolution plus two residual blocks; each decoder tier is a generative
deconvolution, a skip concatenation with the matching encoder tier, two
residual blocks, and (where configured) a pruning block whose binary
classifier removes generated voxels with non-positive logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .sparse import (ConvParams, SparseTensor, avg_pool_cube, generative_deconv,
                     keep_rows, linear_index, sparse_conv)


@dataclass(frozen=True)
class ComNetConfig:
    tiers: int = 4
    channels: tuple = (8, 16, 32, 64)
    in_channels: int = 1
    d_se: int = 32
    b: int = 4
    activation: str = "elu"
    output_convs: int = 2
    pruning: str = "all"  # "all" or "last:<k>" (k finest decoder tiers)
    bias: bool = True

    def __post_init__(self):
        if len(self.channels) != self.tiers:
            raise ConfigError(f"{self.tiers} tiers need {self.tiers} channel counts")
        if self.d_se <= 0 or self.b <= 0:
            raise ConfigError("d_se and b must be positive")

    def pruned_tiers(self):
        """Decoder tier indices (coarse-to-fine: tiers-1 .. 1) with pruning."""
        order = list(range(self.tiers - 1, 0, -1))
        if self.pruning == "all":
            return set(order)
        if self.pruning.startswith("last:"):
            k = int(self.pruning.split(":", 1)[1])
            return set(order[len(order) - k:]) if k else set()
        raise ConfigError(f"unknown pruning placement {self.pruning!r}")


def validate_extent(cfg: ComNetConfig, extent):
    """Check divisibility tier by tier and return the embedding-volume extent."""
    extent = tuple(int(e) for e in extent)
    down = 2 ** (cfg.tiers - 1)
    for e in extent:
        if e % down:
            raise ConfigError(f"extent {extent} not divisible by 2^(tiers-1)={down}")
        if e % cfg.b:
            raise ConfigError(f"extent {extent} not divisible by scale size b={cfg.b}")
    return tuple(e // cfg.b for e in extent)


@dataclass
class PruningTargets:
    """Occupied coarse-voxel key sets of the ground truth, one per stride."""

    extent: tuple
    keys: dict = field(default_factory=dict)  # stride -> sorted int64 keys

    def labels_for(self, coords, stride):
        coarse_extent = tuple(e // stride for e in self.extent)
        if len(coords) == 0:
            return np.zeros(0)
        q = linear_index(coords, coarse_extent)
        sk = self.keys[stride]
        pos = np.searchsorted(sk, q)
        pos_c = np.minimum(pos, max(len(sk) - 1, 0))
        if len(sk) == 0:
            return np.zeros(len(coords))
        return (sk[pos_c] == q).astype(np.float64)


def pruning_targets_from_gt(gt_occ: SparseTensor, strides) -> PruningTargets:
    """A coarse voxel is positive iff its cell contains any ground-truth voxel."""
    targets = PruningTargets(extent=gt_occ.extent)
    for s in strides:
        coarse_extent = tuple(e // s for e in gt_occ.extent)
        if gt_occ.n:
            keys = np.unique(linear_index(gt_occ.coords // s, coarse_extent))
        else:
            keys = np.zeros(0, dtype=np.int64)
        targets.keys[int(s)] = keys
    return targets


@dataclass
class ComNetOutput:
    se: SparseTensor                      # embedding tensor at extent / b
    tier_logits: list                     # [(stride, logits Value, labels or None)]
    tier_coords: dict                     # stride -> decoder coords after pruning


def init_comnet_params(cfg: ComNetConfig, seed=0, prefix="com") -> dict:
    rng = np.random.default_rng(seed)
    params = {}

    def conv(name, k, cin, cout):
        bound = np.sqrt(6.0 / (k ** 3 * cin))
        params[f"{prefix}.{name}.w"] = rng.uniform(-bound, bound, size=(k ** 3, cin, cout))
        if cfg.bias:
            params[f"{prefix}.{name}.b"] = np.zeros(cout)

    def res_block(name, cin, cout):
        conv(f"{name}.a", 3, cin, cout)
        conv(f"{name}.b", 3, cout, cout)
        if cin != cout:
            conv(f"{name}.proj", 1, cin, cout)

    ch = cfg.channels
    conv("enc0.in", 3, cfg.in_channels, ch[0])
    res_block("enc0.res0", ch[0], ch[0])
    res_block("enc0.res1", ch[0], ch[0])
    for t in range(1, cfg.tiers):
        conv(f"enc{t}.down", 2, ch[t - 1], ch[t])
        res_block(f"enc{t}.res0", ch[t], ch[t])
        res_block(f"enc{t}.res1", ch[t], ch[t])
    pruned = cfg.pruned_tiers()
    for t in range(cfg.tiers - 1, 0, -1):
        conv(f"dec{t}.up", 2, ch[t], ch[t - 1])
        res_block(f"dec{t}.res0", 2 * ch[t - 1], ch[t - 1])
        res_block(f"dec{t}.res1", ch[t - 1], ch[t - 1])
        if t in pruned:
            conv(f"dec{t}.prune", 3, ch[t - 1], 1)
    for i in range(cfg.output_convs):
        cout = cfg.d_se if i == cfg.output_convs - 1 else ch[0]
        cin = ch[0]
        conv(f"out{i}", 3, cin, cout)
    return params


def _act(cfg, x):
    return ad.elu(x) if cfg.activation == "elu" else ad.relu(x)


def _conv(params, prefix, name, st, k=3, stride=1, out_coords=None):
    w = params[f"{prefix}.{name}.w"]
    b = params.get(f"{prefix}.{name}.b")
    return sparse_conv(st, ConvParams(w, b, k, stride), out_coords=out_coords)


def _res(params, prefix, name, cfg, st, cin, cout):
    h = _conv(params, prefix, f"{name}.a", st)
    h = h.with_feats(_act(cfg, h.feats))
    h = _conv(params, prefix, f"{name}.b", h)
    skip = st if cin == cout else _conv(params, prefix, f"{name}.proj", st, k=1)
    return st.with_feats(_act(cfg, ad.add(h.feats, skip.feats)))


def comnet_forward(occ: SparseTensor, cfg: ComNetConfig, params,
                   targets: PruningTargets | None = None,
                   teacher_force: bool = False, prefix="com") -> ComNetOutput:
    """Run the encoder/decoder and return the pooled embedding tensor.

    With ``targets`` given, every pruned decoder tier also emits
    (stride, logits, labels) for the completion loss; ``teacher_force``
    replaces the predicted keep-mask with the ground-truth one, which pins the
    decoder coordinate sets to the targets wherever the coarse input covers
    them.
    """
    validate_extent(cfg, occ.extent)
    if occ.m != cfg.in_channels:
        raise ConfigError(f"input has {occ.m} channels, config expects {cfg.in_channels}")
    ch = cfg.channels

    enc = []
    x = _conv(params, prefix, "enc0.in", occ)
    x = x.with_feats(_act(cfg, x.feats))
    x = _res(params, prefix, "enc0.res0", cfg, x, ch[0], ch[0])
    x = _res(params, prefix, "enc0.res1", cfg, x, ch[0], ch[0])
    enc.append(x)
    for t in range(1, cfg.tiers):
        x = _conv(params, prefix, f"enc{t}.down", x, k=2, stride=2)
        x = x.with_feats(_act(cfg, x.feats))
        x = _res(params, prefix, f"enc{t}.res0", cfg, x, ch[t], ch[t])
        x = _res(params, prefix, f"enc{t}.res1", cfg, x, ch[t], ch[t])
        enc.append(x)

    pruned = cfg.pruned_tiers()
    tier_logits = []
    tier_coords = {}
    for t in range(cfg.tiers - 1, 0, -1):
        up = generative_deconv(x, ConvParams(params[f"{prefix}.dec{t}.up.w"],
                                             params.get(f"{prefix}.dec{t}.up.b"),
                                             kernel_size=2, stride=2))
        skip = enc[t - 1]
        rows = skip.rows_of(up.coords)
        skip_feats = ad.gather_pad(skip.feats, rows)
        x = up.with_feats(ad.concat([up.feats, skip_feats], axis=1))
        x = _res(params, prefix, f"dec{t}.res0", cfg, x, 2 * ch[t - 1], ch[t - 1])
        x = _res(params, prefix, f"dec{t}.res1", cfg, x, ch[t - 1], ch[t - 1])
        stride = 2 ** (t - 1)
        if t in pruned:
            logits_st = _conv(params, prefix, f"dec{t}.prune", x)
            logits = ad.reshape(logits_st.feats, (x.n,))
            labels = targets.labels_for(x.coords, stride) if targets is not None else None
            tier_logits.append((stride, logits, labels))
            if teacher_force and labels is not None:
                keep = np.flatnonzero(labels > 0.5)
                x = keep_rows(x, keep)
            else:
                keep_mask = ad._data(logits) > 0.0
                x = keep_rows(x, np.flatnonzero(keep_mask))
        tier_coords[stride] = x.coords

    for i in range(cfg.output_convs):
        x = _conv(params, prefix, f"out{i}", x)
        if i < cfg.output_convs - 1:
            x = x.with_feats(_act(cfg, x.feats))
    se = avg_pool_cube(x, cfg.b)
    return ComNetOutput(se=se, tier_logits=tier_logits, tier_coords=tier_coords)


def completion_loss(tier_logits, eps=1e-7):
    """Mean over supervised blocks of the per-block mean binary cross entropy.

    Probabilities are clamped to [eps, 1-eps]; blocks with no voxels are
    skipped (they cannot contribute evidence either way).
    """
    per_block = []
    for _stride, logits, labels in tier_logits:
        if labels is None:
            raise ValueError("completion loss requires pruning labels")
        n = labels.shape[0]
        if n == 0:
            continue
        p = ad.clip(ad.sigmoid(logits), eps, 1.0 - eps)
        bce = ad.add(ad.mul(labels, ad.log(p)),
                     ad.mul(1.0 - labels, ad.log(ad.sub(1.0, p))))
        per_block.append(ad.mul(ad.vmean(bce), -1.0))
    if not per_block:
        return np.asarray(0.0)
    total = per_block[0]
    for term in per_block[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(per_block))
