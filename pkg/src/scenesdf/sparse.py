"""Hash-coordinate sparse tensor engine.

Voxel data is stored as an ordered list of unique integer coordinates plus a
row-aligned feature matrix. Convolutions are evaluated only at stored
coordinates through kernel maps: per kernel offset, the list of
(input_row, output_row) pairs that contribute. Feature matrices may be plain
arrays or autodiff ``Value``s; all operations thread gradients through the
tape when given the latter.

Conventions:
  * voxelization uses floor((p - bounds_min) / voxel_size) with half-open cells
  * kernel offsets: odd K is centered ([-(K-1)/2, (K-1)/2] per axis), even K
    spans [0, K-1] per axis, so a stride-2 K=2 deconvolution maps a parent u
    to its 2^3 children 2u + {0,1}^3
  * a kernel-map pair (r_in, r_out) exists iff coord_in = stride*coord_out + offset
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError

_MAGIC = b"SPT1"


def linear_index(coords, extent):
    """Row-major linear voxel index, int64."""
    c = np.asarray(coords, dtype=np.int64)
    D, W, H = (int(e) for e in extent)
    return (c[:, 0] * W + c[:, 1]) * H + c[:, 2]


class SparseTensor:
    """Set of occupied voxels with per-voxel feature rows.

    Coordinates keep insertion order; ``canonical_sorted`` yields a copy
    ordered by linear index for reproducible serialization. Instances are
    treated as immutable after construction.
    """

    def __init__(self, coords, feats, extent, stride=1, validate=True):
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        if not isinstance(feats, ad.Value):
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats.reshape(-1, 1)
        self.coords = coords
        self.feats = feats
        self.extent = tuple(int(e) for e in extent)
        self.stride = int(stride)
        if validate:
            self._validate()
        self._sorted_keys = None
        self._sort_order = None

    def _validate(self):
        n = len(self.coords)
        fshape = self.feats.shape if not isinstance(self.feats, ad.Value) else self.feats.data.shape
        if fshape[0] != n:
            raise ValueError(f"feature rows {fshape[0]} != coordinate count {n}")
        if n:
            lo = self.coords.min(axis=0)
            hi = self.coords.max(axis=0)
            if (lo < 0).any() or (hi >= np.asarray(self.extent)).any():
                raise ValueError("coordinate outside extent")
            keys = linear_index(self.coords, self.extent)
            if len(np.unique(keys)) != n:
                raise ValueError("duplicate coordinates")

    @property
    def n(self):
        return len(self.coords)

    @property
    def m(self):
        f = self.feats.data if isinstance(self.feats, ad.Value) else self.feats
        return f.shape[1]

    @property
    def feat_data(self):
        return self.feats.data if isinstance(self.feats, ad.Value) else self.feats

    def _index_arrays(self):
        if self._sorted_keys is None:
            keys = linear_index(self.coords, self.extent)
            order = np.argsort(keys, kind="stable")
            self._sorted_keys = keys[order]
            self._sort_order = order
        return self._sorted_keys, self._sort_order

    def rows_of(self, coords):
        """Exact hash lookup; returns row index per coordinate, -1 if absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if self.n == 0 or len(coords) == 0:
            return np.full(len(coords), -1, dtype=np.intp)
        in_range = ((coords >= 0) & (coords < np.asarray(self.extent))).all(axis=1)
        keys = np.zeros(len(coords), dtype=np.int64)
        keys[in_range] = linear_index(coords[in_range], self.extent)
        skeys, order = self._index_arrays()
        pos = np.searchsorted(skeys, keys)
        pos_c = np.minimum(pos, len(skeys) - 1)
        found = in_range & (skeys[pos_c] == keys)
        rows = np.where(found, order[pos_c], -1)
        return rows.astype(np.intp)

    def row_of(self, coord):
        return int(self.rows_of(np.asarray(coord).reshape(1, 3))[0])

    def canonical_sorted(self):
        order = np.argsort(linear_index(self.coords, self.extent), kind="stable")
        feats = ad.gather(self.feats, order) if isinstance(self.feats, ad.Value) else self.feats[order]
        return SparseTensor(self.coords[order], feats, self.extent, self.stride, validate=False)

    def with_feats(self, feats):
        return SparseTensor(self.coords, feats, self.extent, self.stride, validate=False)


@dataclass
class ConvParams:
    """Per-offset kernel weights ``(K^3, m_in, m_out)`` plus optional bias."""

    weights: object  # ndarray or Value
    bias: object = None  # ndarray, Value, or None
    kernel_size: int = 3
    stride: int = 1

    @property
    def weight_data(self):
        return self.weights.data if isinstance(self.weights, ad.Value) else self.weights


@dataclass
class KernelMap:
    """Per-offset row pairs: offsets[i] pairs (in_rows[i], out_rows[i])."""

    offsets: np.ndarray  # (K^3, 3) int
    pairs: list = field(default_factory=list)  # [(in_rows, out_rows)] per offset
    n_out: int = 0


def kernel_offsets(K, d=3):
    """Offset lattice for kernel size K (see module docstring for parity)."""
    if K % 2 == 1:
        axis = np.arange(-(K // 2), K // 2 + 1)
    else:
        axis = np.arange(K)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def voxelize(points, extent, bounds, feature_mode="occupancy", origin=None):
    """Bin points into occupied voxels over half-open axis-aligned ``bounds``.

    Points outside the bounds are dropped; duplicates collapse to a single
    occupied voxel. ``feature_mode`` selects the per-voxel descriptor:
    "occupancy" (constant 1), "radial" (center distance to ``origin``), or
    "radial_height" (distance and center z).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise DataError("non-finite point coordinates")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(3, 2)
    extent = tuple(int(e) for e in extent)
    if (bounds[:, 1] <= bounds[:, 0]).any():
        raise ValueError("degenerate bounds")
    if min(extent) <= 0:
        raise ValueError("extent must be positive")
    size = (bounds[:, 1] - bounds[:, 0]) / np.asarray(extent, dtype=np.float64)
    idx = np.floor((points - bounds[:, 0]) / size).astype(np.int64)
    inside = ((idx >= 0) & (idx < np.asarray(extent))).all(axis=1)
    idx = idx[inside]
    if len(idx) == 0:
        m = {"occupancy": 1, "radial": 1, "radial_height": 2}[feature_mode]
        return SparseTensor(np.zeros((0, 3), np.int32), np.zeros((0, m)), extent)
    keys = linear_index(idx, extent)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    coords = idx[first]
    centers = bounds[:, 0] + (coords + 0.5) * size
    if feature_mode == "occupancy":
        feats = np.ones((len(coords), 1))
    elif feature_mode in ("radial", "radial_height"):
        o = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        r = np.linalg.norm(centers - o, axis=1, keepdims=True)
        feats = r if feature_mode == "radial" else np.concatenate([r, centers[:, 2:3]], axis=1)
    else:
        raise ValueError(f"unknown feature_mode {feature_mode!r}")
    return SparseTensor(coords, feats, extent)


def build_kernel_map(inp: SparseTensor, out_coords, K, stride=1):
    """Pairs (r_in, r_out) with coord_in = stride*coord_out + offset."""
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    offsets = kernel_offsets(K)
    kmap = KernelMap(offsets=offsets, n_out=len(out_coords))
    base = stride * out_coords
    out_rows_all = np.arange(len(out_coords), dtype=np.intp)
    for off in offsets:
        rows = inp.rows_of(base + off)
        ok = rows >= 0
        kmap.pairs.append((rows[ok], out_rows_all[ok]))
    return kmap


def _kernel_matmul(feats, weights, kmap: KernelMap, n_out, n_in):
    """out[r_out] += feats[r_in] @ W_off over all mapped pairs (one tape node)."""
    tape = ad._tape_of(feats, weights)
    fd = ad._data(feats)
    wd = ad._data(weights)
    m_out = wd.shape[2]
    out = np.zeros((n_out, m_out))
    for i, (rin, rout) in enumerate(kmap.pairs):
        if len(rin):
            np.add.at(out, rout, fd[rin] @ wd[i])

    def vjp_feats(g):
        gf = np.zeros_like(fd)
        for i, (rin, rout) in enumerate(kmap.pairs):
            if len(rin):
                np.add.at(gf, rin, g[rout] @ wd[i].T)
        return gf

    def vjp_weights(g):
        gw = np.zeros_like(wd)
        for i, (rin, rout) in enumerate(kmap.pairs):
            if len(rin):
                gw[i] = fd[rin].T @ g[rout]
        return gw

    return ad.make_node(tape, out, [(feats, vjp_feats), (weights, vjp_weights)])


def sparse_conv(inp: SparseTensor, params: ConvParams, out_coords=None, kmap=None):
    """Generalized sparse convolution evaluated at ``out_coords``.

    Default output coordinates: the input set for stride 1, the deduplicated
    downsampled lattice (coords // stride) otherwise.
    """
    wd = params.weight_data
    if wd.shape[1] != inp.m:
        raise ValueError(f"kernel expects {wd.shape[1]} input channels, got {inp.m}")
    stride = params.stride
    if out_coords is None:
        if stride == 1:
            out_coords = inp.coords
        else:
            down = inp.coords // stride
            keys = linear_index(down, tuple(-(-e // stride) for e in inp.extent))
            _, first = np.unique(keys, return_index=True)
            first.sort()
            out_coords = down[first]
    out_coords = np.asarray(out_coords, dtype=np.int32).reshape(-1, 3)
    if kmap is None:
        kmap = build_kernel_map(inp, out_coords, params.kernel_size, stride)
    out = _kernel_matmul(inp.feats, params.weights, kmap, len(out_coords), inp.n)
    if params.bias is not None:
        out = ad.add(out, params.bias)
    extent = inp.extent if stride == 1 else tuple(-(-e // stride) for e in inp.extent)
    return SparseTensor(out_coords, out, extent, inp.stride * stride, validate=False)


def generative_deconv(inp: SparseTensor, params: ConvParams, stride=None):
    """Transposed sparse convolution that creates the full child neighborhood.

    Output coordinates are every stride*u + offset inside the upsampled
    extent, for every input voxel u; pruning is expected to remove the
    spurious ones later. Values follow transposed-convolution semantics:
    out[s*u + off] += x[u] @ W_off.
    """
    stride = params.stride if stride is None else stride
    K = params.kernel_size
    wd = params.weight_data
    if wd.shape[1] != inp.m:
        raise ValueError(f"kernel expects {wd.shape[1]} input channels, got {inp.m}")
    extent = tuple(e * stride for e in inp.extent)
    offsets = kernel_offsets(K)
    m_out = wd.shape[2]
    if inp.n == 0:
        empty = np.zeros((0, m_out))
        return SparseTensor(np.zeros((0, 3), np.int32), empty, extent, max(1, inp.stride // stride), validate=False)
    base = stride * inp.coords.astype(np.int64)
    cand = (base[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    ok = ((cand >= 0) & (cand < np.asarray(extent))).all(axis=1)
    keys = np.full(len(cand), -1, dtype=np.int64)
    keys[ok] = linear_index(cand[ok], extent)
    uniq, inv = np.unique(keys[ok], return_inverse=True)
    out_coords = np.zeros((len(uniq), 3), dtype=np.int32)
    out_coords[inv] = cand[ok].astype(np.int32)
    out_rows = np.full(len(cand), -1, dtype=np.intp)
    out_rows[ok] = inv
    in_rows_all = np.repeat(np.arange(inp.n, dtype=np.intp), len(offsets))
    kmap = KernelMap(offsets=offsets, n_out=len(uniq))
    for i in range(len(offsets)):
        sel = slice(i, len(cand), len(offsets))
        r_out = out_rows[sel]
        valid = r_out >= 0
        kmap.pairs.append((in_rows_all[sel][valid], r_out[valid]))
    out = _kernel_matmul(inp.feats, params.weights, kmap, len(uniq), inp.n)
    if params.bias is not None:
        out = ad.add(out, params.bias)
    new_stride = inp.stride // stride if inp.stride % stride == 0 else 1
    return SparseTensor(out_coords, out, extent, max(new_stride, 1), validate=False)


def prune(inp: SparseTensor, keep_logits):
    """Keep voxels with strictly positive logit; features pass through."""
    logits = keep_logits.data if isinstance(keep_logits, ad.Value) else np.asarray(keep_logits, dtype=np.float64)
    logits = logits.reshape(-1)
    if len(logits) != inp.n:
        raise ValueError(f"{len(logits)} logits for {inp.n} voxels")
    keep = np.flatnonzero(logits > 0.0)
    feats = ad.gather(inp.feats, keep) if isinstance(inp.feats, ad.Value) else inp.feats[keep]
    return SparseTensor(inp.coords[keep], feats, inp.extent, inp.stride, validate=False)


def keep_rows(inp: SparseTensor, rows):
    """Restrict to the given row subset (used for teacher-forced pruning)."""
    rows = np.asarray(rows, dtype=np.intp)
    feats = ad.gather(inp.feats, rows) if isinstance(inp.feats, ad.Value) else inp.feats[rows]
    return SparseTensor(inp.coords[rows], feats, inp.extent, inp.stride, validate=False)


def avg_pool_cube(inp: SparseTensor, b):
    """Mean-pool features of non-empty voxels within each b^3 cube."""
    b = int(b)
    if any(e % b for e in inp.extent):
        raise ValueError(f"pool size {b} does not divide extent {inp.extent}")
    extent = tuple(e // b for e in inp.extent)
    if inp.n == 0:
        return SparseTensor(np.zeros((0, 3), np.int32), np.zeros((0, inp.m)), extent,
                            inp.stride * b, validate=False)
    cube = inp.coords // b
    keys = linear_index(cube, extent)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    out_coords = np.zeros((len(uniq), 3), dtype=np.int32)
    out_coords[inv] = cube.astype(np.int32)
    summed = ad.scatter_rows(inp.feats, inv, len(uniq))
    out = ad.mul(summed, (1.0 / counts)[:, None])
    return SparseTensor(out_coords, out, extent, inp.stride * b, validate=False)


def to_dense(inp: SparseTensor, fill=0.0):
    """Dense (channels, D, W, H) array; absent voxels carry ``fill``."""
    D, W, H = inp.extent
    out = np.full((inp.m, D, W, H), float(fill))
    if inp.n:
        c = inp.coords
        out[:, c[:, 0], c[:, 1], c[:, 2]] = inp.feat_data.T
    return out


def from_dense(dense, fill=0.0):
    """Inverse of ``to_dense``: cells where any channel differs from fill."""
    dense = np.asarray(dense, dtype=np.float64)
    m, D, W, H = dense.shape
    mask = (dense != fill).any(axis=0)
    coords = np.argwhere(mask).astype(np.int32)
    feats = dense[:, mask].T
    return SparseTensor(coords, feats, (D, W, H))


# ---------------------------------------------------------------------------
# serialization: little-endian binary, magic "SPT1"

def save_spt(path, st: SparseTensor):
    st = st.canonical_sorted()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<iii", 3, st.n, st.m))
        f.write(struct.pack("<iii", *st.extent))
        f.write(np.ascontiguousarray(st.coords, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(st.feat_data, dtype="<f4").tobytes())


def load_spt(path) -> SparseTensor:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic, not a sparse tensor dump")
    d, n, m = struct.unpack("<iii", raw[4:16])
    if d != 3:
        raise DataError(f"{path}: unsupported dimension {d}")
    extent = struct.unpack("<iii", raw[16:28])
    need = 28 + n * d * 4 + n * m * 4
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    coords = np.frombuffer(raw, dtype="<i4", count=n * d, offset=28).reshape(n, d)
    feats = np.frombuffer(raw, dtype="<f4", count=n * m, offset=28 + n * d * 4).reshape(n, m)
    return SparseTensor(coords.astype(np.int32), feats.astype(np.float64), extent)
