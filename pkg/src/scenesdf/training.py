"""Point sampling, the composite boundary-value loss, the optimizer, and the
end-to-end cooperative training loop of the discriminative encoder and the
generative field.

The loss combines four field terms (unit-gradient everywhere, gradient/normal
agreement and zero value on surface samples, and an exp(-alpha*|value|)
repulsion off surface), the pruning cross entropy of the encoder, and the
optional semantic cross entropy. Because the spatial gradient of the field is
itself recorded on the tape, one backward pass yields exact parameter
gradients of all terms, including the unit-gradient one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .comnet import completion_loss, pruning_targets_from_gt
from .errors import DataError, NumericalAbort
from .model import FieldModel
from .scenes import GroundTruth, ScenePair, augment_rotate
from .sparse import linear_index


@dataclass
class PointBatch:
    on_points: np.ndarray          # (N_on, 3)
    on_normals: np.ndarray         # (N_on, 3), unit where valid
    on_valid: np.ndarray           # (N_on,) bool; invalid rows leave the normal term
    off_points: np.ndarray         # (N_off, 3)
    on_labels: np.ndarray = None   # (N_on,) int
    off_labels: np.ndarray = None  # (N_off,) int, 0 = free


@dataclass
class LossWeights:
    l1: float = 3000.0
    l2: float = 100.0
    l3: float = 100.0
    l4: float = 50.0
    l5: float = 100.0
    l6: float = 50.0
    psi_alpha: float = 100.0


def sample_points(gt: GroundTruth, n_on, n_off, rng, strategy="random",
                  prior_scale=1.5) -> PointBatch:
    """Draw surface samples from GT voxel centers (with replacement) and
    free-space samples half from empty GT voxel centers, half uniform over the
    scene box. The "prior" strategy adds near-surface points offset along the
    normals as a third group of free-space samples.
    """
    if gt.n == 0:
        raise DataError("scene has no ground-truth surface voxels")
    centers = gt.centers()
    idx = rng.integers(0, gt.n, size=n_on)
    on_pts = centers[idx]
    on_normals = gt.normals[idx]
    on_labels = gt.labels[idx]

    occ_mask = gt.occupancy_mask()
    empty_flat = np.flatnonzero(~occ_mask)
    D, W, H = gt.extent
    sizes = gt.cell_sizes()

    def empty_centers(k):
        pick = empty_flat[rng.integers(0, len(empty_flat), size=k)]
        coords = np.stack([pick // (W * H), (pick // H) % W, pick % H], axis=1)
        return gt.bounds[:, 0] + (coords + 0.5) * sizes

    def uniform(k):
        return rng.uniform(gt.bounds[:, 0], gt.bounds[:, 1], size=(k, 3))

    if strategy == "random":
        n_empty = n_off // 2
        off_pts = np.concatenate([empty_centers(n_empty), uniform(n_off - n_empty)])
    elif strategy == "prior":
        n3 = n_off // 3
        k = rng.integers(0, gt.n, size=n_off - 2 * n3)
        shift = rng.uniform(0.5, prior_scale, size=(len(k), 1)) * float(sizes.mean())
        sign = np.where(rng.random(size=(len(k), 1)) < 0.5, -1.0, 1.0)
        near = np.clip(centers[k] + sign * shift * gt.normals[k],
                       gt.bounds[:, 0], gt.bounds[:, 1])
        off_pts = np.concatenate([empty_centers(n3), uniform(n3), near])
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")

    return PointBatch(on_points=on_pts, on_normals=on_normals,
                      on_valid=np.ones(n_on, dtype=bool), off_points=off_pts,
                      on_labels=on_labels,
                      off_labels=np.zeros(len(off_pts), dtype=np.int64))


def estimate_normals(points, k=20, sensor_origin=None):
    """Per-point smallest eigenvector of the k-NN covariance.

    Returns (normals, valid): neighborhoods of rank < 2 are flagged invalid.
    With a sensor origin the sign is flipped toward it, otherwise toward a
    canonical half-space (largest-magnitude component positive).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    tree = cKDTree(points)
    _, nb = tree.query(points, k=k)
    nbp = points[nb]                              # (N, k, 3)
    centered = nbp - nbp.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    valid = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-30)
    if sensor_origin is not None:
        to_sensor = np.asarray(sensor_origin, dtype=np.float64) - points
        flip = np.sum(normals * to_sensor, axis=1) < 0
    else:
        lead = np.take_along_axis(normals, np.abs(normals).argmax(axis=1)[:, None], axis=1)[:, 0]
        flip = lead < 0
    normals[flip] = -normals[flip]
    return normals, valid


@dataclass
class SdfLossTerms:
    eikonal: object
    normal: object
    on_surface: object
    off_surface: object
    total: object

    def breakdown(self):
        return {
            "eikonal": float(ad._data(self.eikonal)),
            "normal": float(ad._data(self.normal)),
            "on_surface": float(ad._data(self.on_surface)),
            "off_surface": float(ad._data(self.off_surface)),
            "total": float(ad._data(self.total)),
        }


def _vec_norm(v, eps=1e-18):
    return ad.sqrt(ad.add(ad.vsum(ad.mul(v, v), axis=1), eps))


def sdf_loss(batch: PointBatch, sdf_on, grad_on, sdf_off, grad_off,
             w: LossWeights) -> SdfLossTerms:
    """Weighted boundary-value loss of the field outputs for one batch.

    eikonal: mean | ||grad|| - 1 | over all samples; normal: mean
    (1 - cos(grad, n)) over valid surface samples; on: mean |value| on
    surface; off: mean exp(-alpha |value|) off surface.
    """
    grad_all = ad.concat([grad_on, grad_off], axis=0)
    eik = ad.vmean(ad.absolute(ad.sub(_vec_norm(grad_all), 1.0)))

    valid = np.flatnonzero(batch.on_valid)
    g = ad.gather(grad_on, valid)
    n = batch.on_normals[valid]
    cosine = ad.div(ad.vsum(ad.mul(g, n), axis=1),
                    ad.clip(ad.mul(_vec_norm(g), np.linalg.norm(n, axis=1)),
                            1e-8, None))
    normal = ad.vmean(ad.sub(1.0, cosine)) if len(valid) else np.asarray(0.0)

    on = ad.vmean(ad.absolute(sdf_on))
    off = ad.vmean(ad.exp(ad.mul(ad.absolute(sdf_off), -w.psi_alpha)))

    total = ad.add(ad.add(ad.mul(eik, w.l1), ad.mul(normal, w.l2)),
                   ad.add(ad.mul(on, w.l3), ad.mul(off, w.l4)))
    return SdfLossTerms(eikonal=eik, normal=normal, on_surface=on,
                        off_surface=off, total=total)


def semantic_loss(logits, labels, num_classes):
    """Mean cross entropy of softmax class probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError("label outside [0, num_classes)")
    z = logits
    zd = ad._data(z)
    m = zd.max(axis=1, keepdims=True)  # detached shift; exact by shift invariance
    lse = ad.log(ad.vsum(ad.exp(ad.sub(z, m)), axis=1))
    onehot = np.zeros_like(zd)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.vsum(ad.mul(z, onehot), axis=1)
    return ad.vmean(ad.add(ad.sub(lse, picked), m[:, 0]))


def total_loss(sdf_total, com_loss, seg_loss, w: LossWeights):
    out = ad.add(sdf_total, ad.mul(com_loss, w.l5))
    if w.l6 != 0.0:
        out = ad.add(out, ad.mul(seg_loss, w.l6))
    return out


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-4,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected update, in place; absent grads count as zero."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        g = grads.get(name)
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        if g is None:
            g = 0.0
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop

def fit_baseline(points, sensor_origin, cfg, model: FieldModel | None = None,
                 steps=None, normals_k=20, log=None) -> FieldModel:
    """Per-scene fit of an unconditioned sine network on the sparse input.

    This is the comparison point for the hybrid model: surface samples are the
    raw scan points with PCA-estimated normals, free-space samples are uniform
    over the scene box, and the loss keeps only the four field terms.
    """
    from .config import model_config, replace_config

    if model is None:
        base_cfg = replace_config(cfg, conditioned=False, ssc=False,
                                  enc_levels=0, enc_include_xyz=True)
        model = FieldModel.build(model_config(base_cfg), seed=cfg.seed)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DataError("baseline fit needs a non-empty scan")
    k = min(normals_k, len(points))
    if k >= 3:
        normals, valid = estimate_normals(points, k=k, sensor_origin=sensor_origin)
    else:
        normals = np.zeros_like(points)
        valid = np.zeros(len(points), dtype=bool)
    w = LossWeights(l1=cfg.lambda1, l2=cfg.lambda2, l3=cfg.lambda3,
                    l4=cfg.lambda4, psi_alpha=cfg.psi_alpha)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    steps = cfg.epochs if steps is None else steps
    for step in range(steps):
        idx = rng.integers(0, len(points), size=cfg.n_on)
        batch = PointBatch(on_points=points[idx], on_normals=normals[idx],
                           on_valid=valid[idx],
                           off_points=rng.uniform(-1.0, 1.0, size=(cfg.n_off, 3)))
        tape = ad.Tape()
        lifted = model.lift(tape)
        ev_on = model.field(lifted, batch.on_points, None, want_grad=True)
        ev_off = model.field(lifted, batch.off_points, None, want_grad=True)
        terms = sdf_loss(batch, ev_on.sdf, ev_on.grad, ev_off.sdf, ev_off.grad, w)
        loss_val = float(ad._data(terms.total))
        if not np.isfinite(loss_val):
            raise NumericalAbort(f"non-finite baseline loss at step {step}",
                                 terms.breakdown())
        tape.backward(terms.total)
        grads = {name: v.grad for name, v in lifted.items() if v.grad is not None}
        adam_step(model.params, grads, state, lr=cfg.lr, beta1=cfg.adam_beta1,
                  beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        if log and (step + 1) % 50 == 0:
            log(f"baseline step {step + 1}: total={loss_val:.4f}")
    return model


METRIC_COLUMNS = ("epoch", "L_sdf_eik", "L_sdf_norm", "L_sdf_on", "L_sdf_off",
                  "L_com", "L_seg", "total", "IoU_val")


@dataclass
class TrainResult:
    model: FieldModel
    metrics: list                 # one dict per epoch, METRIC_COLUMNS keys
    weights: LossWeights
    clamped_queries: int = 0


def decoder_strides(comnet_cfg):
    return [2 ** (t - 1) for t in range(comnet_cfg.tiers - 1, 0, -1)]


def train(dataset, cfg, model: FieldModel | None = None, val_pair: ScenePair | None = None,
          log=None, out_dir=None) -> TrainResult:
    """Optimize the hybrid model on a list of scene pairs.

    ``cfg`` is a RunConfig (see config module). Loss-term curves land in the
    returned metrics; a non-finite loss aborts with a term-breakdown dump.
    """
    from .config import model_config  # local import to avoid a cycle
    from .inference import eval_scene_iou

    if not dataset:
        raise DataError("training needs at least one scene")
    if model is None:
        model = FieldModel.build(model_config(cfg), seed=cfg.seed)
    w = LossWeights(l1=cfg.lambda1, l2=cfg.lambda2, l3=cfg.lambda3,
                    l4=cfg.lambda4, l5=cfg.lambda5,
                    l6=cfg.lambda6 if cfg.ssc else 0.0,
                    psi_alpha=cfg.psi_alpha)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    strides = decoder_strides(model.cfg.comnet) if model.cfg.conditioned else []
    metrics = []
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(("eik", "norm", "on", "off", "com", "seg", "total"), 0.0)
        for pair in dataset:
            if cfg.augment_rotate:
                pair = augment_rotate(pair, float(rng.uniform(-45.0, 45.0)))
            batch = sample_points(pair.gt, cfg.n_on, cfg.n_off, rng,
                                  strategy=cfg.sample_strategy)
            tape = ad.Tape()
            lifted = model.lift(tape)
            com_l = np.asarray(0.0)
            volume = None
            if model.cfg.conditioned:
                occ = model.voxelize_input(pair.points, origin=pair.sensor_origin)
                targets = pruning_targets_from_gt(pair.gt.occupancy(), strides)
                volume, com_out = model.embed(lifted, occ, targets=targets,
                                              teacher_force=epoch < cfg.teacher_force_epochs)
                if com_out.tier_logits:
                    com_l = completion_loss(com_out.tier_logits)
            want_sem = cfg.ssc and model.cfg.num_classes > 0
            ev_on = model.field(lifted, batch.on_points, volume, want_grad=True,
                                want_sem=want_sem)
            ev_off = model.field(lifted, batch.off_points, volume, want_grad=True,
                                 want_sem=want_sem)
            terms = sdf_loss(batch, ev_on.sdf, ev_on.grad, ev_off.sdf,
                             ev_off.grad, w)
            seg_l = np.asarray(0.0)
            if want_sem:
                logits = ad.concat([ev_on.sem_logits, ev_off.sem_logits], axis=0)
                labels = np.concatenate([batch.on_labels, batch.off_labels])
                seg_l = semantic_loss(logits, labels, model.cfg.num_classes)
            loss = total_loss(terms.total, com_l, seg_l, w)
            loss_val = float(ad._data(loss))
            if not np.isfinite(loss_val):
                breakdown = terms.breakdown()
                breakdown["com"] = float(ad._data(com_l))
                breakdown["seg"] = float(ad._data(seg_l))
                if out_dir:
                    with open(os.path.join(out_dir, "abort.txt"), "w") as f:
                        for k, v in breakdown.items():
                            f.write(f"{k} = {v!r}\n")
                raise NumericalAbort(f"non-finite loss at epoch {epoch}", breakdown)
            tape.backward(loss)
            grads = {k: v.grad for k, v in lifted.items() if v.grad is not None}
            adam_step(model.params, grads, state, lr=cfg.lr, beta1=cfg.adam_beta1,
                      beta2=cfg.adam_beta2, eps=cfg.adam_eps)
            sums["eik"] += float(ad._data(terms.eikonal))
            sums["norm"] += float(ad._data(terms.normal))
            sums["on"] += float(ad._data(terms.on_surface))
            sums["off"] += float(ad._data(terms.off_surface))
            sums["com"] += float(ad._data(com_l))
            sums["seg"] += float(ad._data(seg_l))
            sums["total"] += loss_val
        n = len(dataset)
        row = {
            "epoch": epoch,
            "L_sdf_eik": sums["eik"] / n,
            "L_sdf_norm": sums["norm"] / n,
            "L_sdf_on": sums["on"] / n,
            "L_sdf_off": sums["off"] / n,
            "L_com": sums["com"] / n,
            "L_seg": sums["seg"] / n,
            "total": sums["total"] / n,
            "IoU_val": "",
        }
        if val_pair is not None and (epoch + 1) % cfg.eval_every == 0:
            row["IoU_val"] = eval_scene_iou(model, val_pair, v_th=cfg.v_th)
        metrics.append(row)
        if log:
            log(f"epoch {epoch}: total={row['total']:.4f} eik={row['L_sdf_eik']:.4f} "
                f"on={row['L_sdf_on']:.4f} com={row['L_com']:.4f}")
    return TrainResult(model=model, metrics=metrics, weights=w)
