"""Differentiable trilinear sampling of the shape-embedding volume, plus
sinusoidal positional encoding of normalized scene coordinates.

Grid convention: an axis with N cells over [lo, hi) has centers at
g = 0..N-1 in grid units, with world->grid mapping g = (x - lo)/cell - 0.5.
Interpolation uses the product hat weights max(0, 1 - |delta|) of the 8
surrounding centers after normalizing the voxel edge to 1. Queries in the
half-cell margin outside the outermost centers (and any axis with N = 1)
degrade to bilinear/constant interpolation via border clamping, which keeps
the sampled field continuous everywhere. Queries outside the volume bounds
are clamped and counted.

At an interior cell boundary the spatial derivative uses the left cell
(one-sided), a fixed choice on a measure-zero set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sparse import SparseTensor, linear_index


@dataclass
class ShapeEmbeddingVolume:
    """Dense low-resolution grid of embeddings with a world-to-grid transform.

    ``rows`` is the flat (D*W*H, d) feature table in row-major cell order;
    it may be an autodiff Value so gradients can flow back to the encoder.
    """

    rows: object
    extent: tuple
    bounds: np.ndarray  # (3, 2)

    @property
    def channels(self):
        d = self.rows.data if isinstance(self.rows, ad.Value) else self.rows
        return d.shape[1]

    @property
    def row_data(self):
        return self.rows.data if isinstance(self.rows, ad.Value) else self.rows

    def dense(self):
        """(channels, D, W, H) ndarray copy (detached)."""
        D, W, H = self.extent
        return self.row_data.T.reshape(-1, D, W, H)

    def cell_sizes(self):
        span = self.bounds[:, 1] - self.bounds[:, 0]
        return span / np.asarray(self.extent, dtype=np.float64)

    def to_grid(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return (x - self.bounds[:, 0]) / self.cell_sizes() - 0.5


def embedding_volume(se: SparseTensor, bounds) -> ShapeEmbeddingVolume:
    """Densify a sparse embedding tensor; absent cells hold zero vectors."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(3, 2)
    D, W, H = se.extent
    cells = D * W * H
    if se.n:
        lin = linear_index(se.coords, se.extent)
        rows = ad.scatter_rows(se.feats, lin, cells)
    else:
        rows = np.zeros((cells, se.m))
    return ShapeEmbeddingVolume(rows=rows, extent=se.extent, bounds=bounds)


@dataclass
class TrilinearRecord:
    """Everything the backward pass and spatial-derivative path need."""

    lin: np.ndarray        # (P, 8) flat corner indices
    weights: np.ndarray    # (P, 8)
    dwdx: np.ndarray       # (P, 8, 3) weight derivatives w.r.t. world coords
    n_cells: int
    n_out_of_bounds: int


_CORNER_BITS = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)])


def _corner_setup(x, vol: ShapeEmbeddingVolume):
    ext = np.asarray(vol.extent, dtype=np.int64)
    g = vol.to_grid(x)
    oob = (x < vol.bounds[:, 0]) | (x > vol.bounds[:, 1])
    clamped_axis = (g < 0.0) | (g > ext - 1.0)
    gc = np.clip(g, 0.0, ext - 1.0)
    fl = np.floor(gc)
    c0 = np.where(gc == fl, fl - 1.0, fl)
    c0 = np.clip(c0, 0.0, np.maximum(ext - 2.0, 0.0)).astype(np.int64)
    c1 = np.minimum(c0 + 1, ext - 1)
    f = gc - c0
    return g, gc, c0, c1, f, clamped_axis, int(np.count_nonzero(oob.any(axis=1)))


def trilinear_weights(x, vol: ShapeEmbeddingVolume) -> TrilinearRecord:
    """Corner indices, hat weights and their spatial derivatives for ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    _, _, c0, c1, f, clamped_axis, n_oob = _corner_setup(x, vol)
    P = len(x)
    D, W, H = vol.extent
    corners = np.empty((P, 8, 3), dtype=np.int64)
    w = np.ones((P, 8))
    dwdg = np.zeros((P, 8, 3))
    inv_cell = 1.0 / vol.cell_sizes()
    deriv_scale = np.where(clamped_axis, 0.0, inv_cell)
    for k in range(8):
        bits = _CORNER_BITS[k]
        factors = np.where(bits, f, 1.0 - f)  # (P, 3)
        corners[:, k, :] = np.where(bits, c1, c0)
        w[:, k] = factors.prod(axis=1)
        for axis in range(3):
            others = np.prod(np.delete(factors, axis, axis=1), axis=1)
            sign = 1.0 if bits[axis] else -1.0
            dwdg[:, k, axis] = sign * others * deriv_scale[:, axis]
    lin = (corners[:, :, 0] * W + corners[:, :, 1]) * H + corners[:, :, 2]
    return TrilinearRecord(lin=lin, weights=w, dwdx=dwdg, n_cells=D * W * H,
                           n_out_of_bounds=n_oob)


def _weighted_gather(rows, lin, w):
    """Sum over 8 corners of w[:, k] * rows[lin[:, k]], as one tape node."""
    tape = ad._tape_of(rows)
    rd = ad._data(rows)
    out = np.einsum("pk,pkd->pd", w, rd[lin])

    def vjp(g):
        grad = np.zeros_like(rd)
        np.add.at(grad, lin.ravel(), (g[:, None, :] * w[:, :, None]).reshape(-1, rd.shape[1]))
        return grad

    return ad.make_node(tape, out, [(rows, vjp)])


def trilinear_sample(x, vol: ShapeEmbeddingVolume):
    """Sample per-point embeddings from the 8 nearest voxel centers.

    Returns ``(e, record)``; ``e`` is (P, d) and tracks gradients whenever the
    volume does.
    """
    record = trilinear_weights(x, vol)
    e = _weighted_gather(vol.rows, record.lin, record.weights)
    return e, record


def trilinear_dx(vol: ShapeEmbeddingVolume, record: TrilinearRecord):
    """Spatial derivative of the sampled embedding: three (P, d) arrays."""
    return [_weighted_gather(vol.rows, record.lin, record.dwdx[:, :, axis])
            for axis in range(3)]


def trilinear_backward(grad_e, record: TrilinearRecord, vol: ShapeEmbeddingVolume):
    """Explicit vector-Jacobian products of trilinear sampling.

    Returns ``(grad_rows, grad_x)`` where ``grad_rows`` is (D*W*H, d): the
    forward weight matrix transposed applied to ``grad_e``, and ``grad_x`` is
    (P, 3) from the piecewise-linear weight derivatives (zero along clamped
    axes, left-cell one-sided at interior cell boundaries).
    """
    grad_e = np.asarray(grad_e, dtype=np.float64)
    rd = vol.row_data
    grad_rows = np.zeros_like(rd)
    np.add.at(grad_rows, record.lin.ravel(),
              (grad_e[:, None, :] * record.weights[:, :, None]).reshape(-1, rd.shape[1]))
    corners = rd[record.lin]  # (P, 8, d)
    grad_x = np.einsum("pd,pkd,pka->pa", grad_e, corners, record.dwdx)
    return grad_rows, grad_x


def nearest_sample(x, vol: ShapeEmbeddingVolume):
    """Nearest-center sampling (ablation baseline): piecewise-constant field."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    ext = np.asarray(vol.extent, dtype=np.int64)
    g = vol.to_grid(x)
    idx = np.clip(np.rint(g), 0, ext - 1).astype(np.int64)
    D, W, H = vol.extent
    lin = (idx[:, 0] * W + idx[:, 1]) * H + idx[:, 2]
    e = ad.gather(vol.rows, lin)
    return e, lin


# ---------------------------------------------------------------------------
# positional encoding

def encoding_dim(levels, include_xyz):
    return 3 * 2 * int(levels) + (3 if include_xyz else 0)


def positional_encode(x, levels, include_xyz=True):
    """Per-axis (sin 2^k pi p, cos 2^k pi p) features, k = 0..levels-1.

    With ``include_xyz`` the raw coordinates are prepended; levels=10 with xyz
    gives the 63-dimensional representation.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    parts = [x] if include_xyz else []
    for axis in range(3):
        p = x[:, axis:axis + 1]
        for k in range(int(levels)):
            arg = (2.0 ** k) * np.pi * p
            parts.append(np.sin(arg))
            parts.append(np.cos(arg))
    if not parts:
        return np.zeros((len(x), 0))
    return np.concatenate(parts, axis=1)


def positional_encode_jacobian(x, levels, include_xyz=True):
    """(P, d_enc, 3) analytic Jacobian of ``positional_encode``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    P = len(x)
    d = encoding_dim(levels, include_xyz)
    jac = np.zeros((P, d, 3))
    col = 0
    if include_xyz:
        for axis in range(3):
            jac[:, col, axis] = 1.0
            col += 1
    for axis in range(3):
        p = x[:, axis]
        for k in range(int(levels)):
            w = (2.0 ** k) * np.pi
            jac[:, col, axis] = w * np.cos(w * p)
            col += 1
            jac[:, col, axis] = -w * np.sin(w * p)
            col += 1
    return jac
