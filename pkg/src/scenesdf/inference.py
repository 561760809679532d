"""Grid querying of the learned field, surface selection, IoU / mIoU
metrics, threshold sweeps, nearest-neighbor label transfer, and mesh export.

Query lattices use the cell-center convention: axis with N cells over [-1, 1]
has sample points x = -1 + (2i + 1)/N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .model import FieldModel
from .scenes import UNIT_BOUNDS, ScenePair


def query_grid(resolution, bounds=None):
    """Cell-center lattice points; ``resolution`` is an int or per-axis triple."""
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    res = tuple(int(r) for r in resolution)
    if min(res) < 1:
        raise ValueError("resolution must be at least 1 per axis")
    bounds = UNIT_BOUNDS if bounds is None else np.asarray(bounds, dtype=np.float64)
    axes = [bounds[a, 0] + (np.arange(res[a]) + 0.5) * (bounds[a, 1] - bounds[a, 0]) / res[a]
            for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([x.ravel() for x in g], axis=-1)
    return pts, res


@dataclass
class QueryResult:
    sdf: np.ndarray               # flat (N,)
    resolution: tuple
    sem_labels: np.ndarray = None  # flat (N,) argmax class, if requested
    grads: np.ndarray = None       # (N, 3), if requested
    volume: object = None          # embedding volume for reuse

    def sdf_grid(self):
        return self.sdf.reshape(self.resolution)


def query_field(model: FieldModel, scene_points, resolution, volume=None,
                want_sem=False, want_grad=False, chunk=8192, origin=None) -> QueryResult:
    """Evaluate the full composite field on a lattice, chunked for memory."""
    if model.cfg.conditioned and volume is None:
        occ = model.voxelize_input(scene_points, origin=origin)
        volume, _ = model.embed(model.params, occ)
    pts, res = query_grid(resolution)
    sdf = np.empty(len(pts))
    sem = np.empty(len(pts), dtype=np.int64) if want_sem else None
    grads = np.empty((len(pts), 3)) if want_grad else None
    for lo in range(0, len(pts), chunk):
        sl = slice(lo, min(lo + chunk, len(pts)))
        ev = model.field(model.params, pts[sl], volume, want_grad=want_grad,
                         want_sem=want_sem)
        sdf[sl] = np.asarray(ev.sdf)
        if want_sem:
            sem[sl] = np.asarray(ev.sem_logits).argmax(axis=1)
        if want_grad:
            grads[sl] = np.asarray(ev.grad)
    return QueryResult(sdf=sdf, resolution=res, sem_labels=sem, grads=grads,
                       volume=volume)


def select_surface(sdf, v_th):
    """Keep lattice points with |sdf| <= v_th (inclusive)."""
    if v_th <= 0:
        raise ValueError("v_th must be positive")
    return np.abs(np.asarray(sdf)) <= v_th


def compute_iou(pred_mask, gt_mask):
    """Occupancy IoU in percent; empty-vs-empty counts as a perfect 100."""
    pred_mask = np.asarray(pred_mask, dtype=bool).ravel()
    gt_mask = np.asarray(gt_mask, dtype=bool).ravel()
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("prediction and ground truth live on different lattices")
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        import warnings
        warnings.warn("IoU of two empty sets defined as 100")
        return 100.0
    inter = np.count_nonzero(pred_mask & gt_mask)
    return 100.0 * inter / union


def compute_miou(pred_labels, gt_labels, num_classes, ignore=0):
    """Per-class IoU from confusion counts plus their mean.

    Class ``ignore`` (unlabelled / free) is excluded from the mean; classes
    absent from both prediction and ground truth contribute 0.
    """
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    gt = np.asarray(gt_labels, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label grids differ in size")
    per_class = {}
    for c in range(num_classes):
        if c == ignore:
            continue
        tp = np.count_nonzero((pred == c) & (gt == c))
        fp = np.count_nonzero((pred == c) & (gt != c))
        fn = np.count_nonzero((pred != c) & (gt == c))
        denom = tp + fp + fn
        per_class[c] = 100.0 * tp / denom if denom else 0.0
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, miou


def threshold_sweep(sdf, gt_mask, thresholds):
    """(v_th, IoU, |pred|) rows over ascending thresholds, one field pass."""
    thresholds = sorted(float(t) for t in thresholds)
    if len(thresholds) < 2:
        raise ValueError("sweep needs at least two thresholds")
    rows = []
    for v in thresholds:
        mask = select_surface(sdf, v)
        rows.append((v, compute_iou(mask, gt_mask), int(np.count_nonzero(mask))))
    return rows


def best_threshold(sdf, gt_mask, thresholds):
    rows = threshold_sweep(sdf, gt_mask, thresholds)
    best = max(rows, key=lambda r: r[1])
    return best[0], rows


def eval_scene_iou(model: FieldModel, pair: ScenePair, v_th=0.0,
                   sweep=(0.002, 0.2, 20)):
    """Completion IoU of a scene at ``v_th``; non-positive v_th auto-selects
    the best threshold from a logarithmic sweep on this scene."""
    res = query_field(model, pair.points, pair.gt.extent, origin=pair.sensor_origin)
    gt_mask = pair.gt.occupancy_mask()
    if v_th and v_th > 0:
        return compute_iou(select_surface(res.sdf, v_th), gt_mask)
    lo, hi, n = sweep
    vth, rows = best_threshold(res.sdf, gt_mask, np.geomspace(lo, hi, int(n)))
    return max(r[1] for r in rows)


def knn_label_transfer(points, labeled_points, labels, k=1):
    """Majority label of the k nearest labeled voxel centers.

    Ties break by nearest member distance, then by the lowest class id.
    """
    labeled_points = np.asarray(labeled_points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(labeled_points) == 0:
        raise DataError("label transfer needs a non-empty labeled set")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(labeled_points))
    tree = cKDTree(labeled_points)
    dist, idx = tree.query(points, k=k)
    if k == 1:
        return labels[np.atleast_1d(idx)]
    nb_labels = labels[idx]                       # (Q, k)
    n_classes = int(labels.max()) + 1
    counts = np.zeros((len(points), n_classes), dtype=np.int64)
    best_dist = np.full((len(points), n_classes), np.inf)
    rows = np.arange(len(points))
    for j in range(k):
        counts[rows, nb_labels[:, j]] += 1
        np.minimum.at(best_dist, (rows, nb_labels[:, j]), dist[:, j])
    top = counts.max(axis=1, keepdims=True)
    cand_dist = np.where(counts == top, best_dist, np.inf)
    return cand_dist.argmin(axis=1)  # argmin takes the lowest id on distance ties


def export_mesh(path, sdf_grid, bounds=None, iso=0.0):
    """Marching-cubes triangulation of the iso level, written as ASCII PLY.

    A field that never crosses the level yields an empty (but valid) mesh.
    Returns (n_vertices, n_faces).
    """
    from skimage import measure

    sdf_grid = np.asarray(sdf_grid, dtype=np.float64)
    if sdf_grid.ndim != 3 or min(sdf_grid.shape) < 2:
        raise ValueError("mesh export needs a grid of at least 2 cells per axis")
    bounds = UNIT_BOUNDS if bounds is None else np.asarray(bounds, dtype=np.float64)
    sizes = (bounds[:, 1] - bounds[:, 0]) / np.asarray(sdf_grid.shape)
    if sdf_grid.min() < iso < sdf_grid.max():
        verts, faces, _, _ = measure.marching_cubes(sdf_grid, level=iso,
                                                    spacing=tuple(sizes))
        verts = verts + bounds[:, 0] + 0.5 * sizes
    else:
        verts = np.zeros((0, 3))
        faces = np.zeros((0, 3), dtype=np.int64)
    lines = ["ply", "format ascii 1.0",
             f"element vertex {len(verts)}",
             "property float x", "property float y", "property float z",
             f"element face {len(faces)}",
             "property list uchar int vertex_indices", "end_header"]
    for v in verts:
        lines.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    for f in faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(verts), len(faces)
