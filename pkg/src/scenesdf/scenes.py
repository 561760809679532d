"""Synthetic road-like scenes with exact analytic signed distance functions,
a ray-cast LiDAR sampler, ground-truth voxelization, dataset files, and
SemanticKITTI-format loaders.

Scenes live in the normalized frame [-1, 1]^3 with z as the gravity axis, so
the analytic SDF satisfies the unit-gradient property there. The sparse input
mimics a spinning LiDAR: fixed angular beam density, first-return occlusion,
and surface-point density that falls with radial distance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .sparse import SparseTensor, linear_index, load_spt, save_spt

UNIT_BOUNDS = np.array([[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]])

CLASS_NAMES = ("free", "ground", "building", "vehicle", "pole", "vegetation")
NUM_CLASSES = len(CLASS_NAMES)

KITTI_EXTENT = (256, 256, 32)
KITTI_CROP = np.array([[0.0, 51.2], [-25.6, 25.6], [-2.0, 4.4]])


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Plane:
    normal: tuple
    offset: float
    label: int = 1

    def sdf(self, p):
        n = np.asarray(self.normal)
        return p @ n - self.offset

    def grad(self, p):
        return np.broadcast_to(np.asarray(self.normal, dtype=np.float64), p.shape).copy()


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    label: int = 5

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def grad(self, p):
        r = p - np.asarray(self.center)
        d = np.linalg.norm(r, axis=1, keepdims=True)
        out = np.zeros_like(r)
        ok = d[:, 0] > 0
        out[ok] = r[ok] / d[ok]
        out[~ok] = (0.0, 0.0, 1.0)
        return out


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    label: int = 2

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.maximum(q, 0.0)
        return np.linalg.norm(outside, axis=1) + np.minimum(q.max(axis=1), 0.0)

    def grad(self, p):
        rel = p - np.asarray(self.center)
        q = np.abs(rel) - np.asarray(self.half)
        outside = np.maximum(q, 0.0)
        norm = np.linalg.norm(outside, axis=1, keepdims=True)
        g = np.zeros_like(rel)
        out_mask = norm[:, 0] > 0
        g[out_mask] = np.sign(rel[out_mask]) * outside[out_mask] / norm[out_mask]
        inside = ~out_mask
        if inside.any():
            amax = q[inside].argmax(axis=1)
            rows = np.flatnonzero(inside)
            g[rows, amax] = np.sign(rel[rows, amax])
            g[rows, amax] = np.where(g[rows, amax] == 0, 1.0, g[rows, amax])
        return g


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    radius: float
    half_height: float
    label: int = 4

    def sdf(self, p):
        rel = p - np.asarray(self.center)
        qr = np.linalg.norm(rel[:, :2], axis=1) - self.radius
        qz = np.abs(rel[:, 2]) - self.half_height
        q = np.stack([qr, qz], axis=1)
        outside = np.maximum(q, 0.0)
        return np.minimum(np.maximum(qr, qz), 0.0) + np.linalg.norm(outside, axis=1)

    def grad(self, p):
        rel = p - np.asarray(self.center)
        rxy = np.linalg.norm(rel[:, :2], axis=1)
        u = np.zeros((len(p), 2))
        ok = rxy > 0
        u[ok] = rel[ok, :2] / rxy[ok, None]
        u[~ok] = (1.0, 0.0)
        zsign = np.where(rel[:, 2] >= 0, 1.0, -1.0)
        qr = rxy - self.radius
        qz = np.abs(rel[:, 2]) - self.half_height
        wr = np.maximum(qr, 0.0)
        wz = np.maximum(qz, 0.0)
        wnorm = np.sqrt(wr ** 2 + wz ** 2)
        g = np.zeros_like(rel)
        out_mask = wnorm > 0
        g[out_mask, 0] = u[out_mask, 0] * wr[out_mask] / wnorm[out_mask]
        g[out_mask, 1] = u[out_mask, 1] * wr[out_mask] / wnorm[out_mask]
        g[out_mask, 2] = zsign[out_mask] * wz[out_mask] / wnorm[out_mask]
        inside = ~out_mask
        radial = inside & (qr >= qz)
        g[radial, 0] = u[radial, 0]
        g[radial, 1] = u[radial, 1]
        axial = inside & (qr < qz)
        g[axial, 2] = zsign[axial]
        return g


# ---------------------------------------------------------------------------
# scene composition

@dataclass
class SyntheticScene:
    prims: list
    seed: int = 0
    sensor_origin: tuple = (0.0, 0.0, -0.2)

    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return np.min(np.stack([pr.sdf(p) for pr in self.prims], axis=1), axis=1)

    def _per_prim(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return p, np.stack([pr.sdf(p) for pr in self.prims], axis=1)

    def normals(self, p):
        """Unit gradient of the union SDF (gradient of the winning primitive)."""
        p, vals = self._per_prim(p)
        winner = vals.argmin(axis=1)
        out = np.zeros_like(p)
        for i, pr in enumerate(self.prims):
            mask = winner == i
            if mask.any():
                out[mask] = pr.grad(p[mask])
        return out

    def labels(self, p):
        """Semantic class of the nearest primitive (smallest |sdf|)."""
        p, vals = self._per_prim(p)
        nearest = np.abs(vals).argmin(axis=1)
        lab = np.array([pr.label for pr in self.prims])
        return lab[nearest]


@dataclass(frozen=True)
class SceneSpec:
    ground_z: float = -0.55
    min_extra: int = 3
    max_extra: int = 10
    clear_radius: float = 0.22   # keep the sensor column free of solids
    place_radius: float = 0.8


def generate_scene(seed, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Deterministic scene: a ground plane plus 3-10 primitives.

    The first four extra primitives cover the building/vehicle/pole/vegetation
    classes so every semantic class occurs in every scene.
    """
    if spec.max_extra < spec.min_extra or spec.min_extra < 0:
        raise ValueError("invalid primitive count range")
    rng = np.random.default_rng(seed)
    prims = [Plane((0.0, 0.0, 1.0), spec.ground_z, label=1)]
    n_extra = int(rng.integers(spec.min_extra, spec.max_extra + 1))
    kinds = ["building", "vehicle", "pole", "vegetation"]
    for i in range(n_extra):
        kind = kinds[i] if i < len(kinds) else kinds[int(rng.integers(0, len(kinds)))]
        while True:
            xy = rng.uniform(-spec.place_radius, spec.place_radius, size=2)
            if np.linalg.norm(xy) > spec.clear_radius:
                break
        z0 = spec.ground_z
        if kind == "building":
            half = (rng.uniform(0.10, 0.25), rng.uniform(0.10, 0.25), rng.uniform(0.12, 0.30))
            prims.append(Box((xy[0], xy[1], z0 + half[2]), half, label=2))
        elif kind == "vehicle":
            half = (rng.uniform(0.07, 0.14), rng.uniform(0.05, 0.09), rng.uniform(0.03, 0.06))
            prims.append(Box((xy[0], xy[1], z0 + half[2]), half, label=3))
        elif kind == "pole":
            r = rng.uniform(0.02, 0.04)
            hh = rng.uniform(0.15, 0.35)
            prims.append(Cylinder((xy[0], xy[1], z0 + hh), r, hh, label=4))
        else:
            r = rng.uniform(0.06, 0.16)
            prims.append(Sphere((xy[0], xy[1], z0 + 0.9 * r), r, label=5))
    return SyntheticScene(prims=prims, seed=int(seed))


# ---------------------------------------------------------------------------
# LiDAR sampling by ray marching

def _ray_directions(n_beams, n_azimuth, elev_range_deg=(-60.0, 20.0)):
    elev = np.deg2rad(np.linspace(elev_range_deg[0], elev_range_deg[1], n_beams))
    azim = np.linspace(0.0, 2.0 * np.pi, n_azimuth, endpoint=False)
    e, a = np.meshgrid(elev, azim, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return d.reshape(-1, 3)


def lidar_sample(scene: SyntheticScene, sensor_origin=None, n_beams=16,
                 n_azimuth=180, occlusion=True, max_range=3.0, tol=1e-4,
                 max_steps=256):
    """Ray-march beams against the analytic SDF and return surface hits.

    Marching steps by the |SDF| (sphere tracing), which cannot skip a surface;
    each sign change is refined by bisection to |sdf| <= tol. With occlusion
    only the first crossing per beam survives, mimicking a real scan; without
    it every crossing along the ray is kept.
    """
    origin = np.asarray(scene.sensor_origin if sensor_origin is None else sensor_origin,
                        dtype=np.float64)
    if scene.sdf(origin[None])[0] <= 0:
        raise ValueError("sensor origin lies inside a solid")
    dirs = _ray_directions(n_beams, n_azimuth)
    n = len(dirs)
    t = np.zeros(n)
    prev_t = np.zeros(n)
    prev_sdf = scene.sdf(origin[None] + 0.0 * dirs)
    active = np.ones(n, dtype=bool)
    hits = []          # (ray, order, point)
    order = np.zeros(n, dtype=np.int64)
    for _ in range(max_steps):
        if not active.any():
            break
        pos = origin + t[:, None] * dirs
        sdf = scene.sdf(pos)
        crossed = active & (np.sign(sdf) != np.sign(prev_sdf)) & (t > 0)
        if crossed.any():
            lo = prev_t[crossed].copy()
            hi = t[crossed].copy()
            rays = np.flatnonzero(crossed)
            for _b in range(40):
                mid = 0.5 * (lo + hi)
                smid = scene.sdf(origin + mid[:, None] * dirs[rays])
                same = np.sign(smid) == np.sign(prev_sdf[rays])
                lo = np.where(same, mid, lo)
                hi = np.where(same, hi, mid)
            tm = 0.5 * (lo + hi)
            pts = origin + tm[:, None] * dirs[rays]
            for r, pt in zip(rays, pts):
                hits.append((int(r), int(order[r]), pt))
                order[r] += 1
            if occlusion:
                active[crossed] = False
        prev_t = t.copy()
        prev_sdf = sdf
        step = np.maximum(np.abs(sdf), tol)
        t = t + np.where(active, step, 0.0)
        active &= t <= max_range
    if not hits:
        return np.zeros((0, 3))
    pts = np.array([h[2] for h in hits])
    inside = (np.abs(pts) <= 1.0).all(axis=1)
    return pts[inside]


# ---------------------------------------------------------------------------
# ground truth voxelization

@dataclass
class GroundTruth:
    coords: np.ndarray    # (n, 3) int32 occupied cells
    labels: np.ndarray    # (n,) int
    normals: np.ndarray   # (n, 3) unit
    extent: tuple
    bounds: np.ndarray = field(default_factory=lambda: UNIT_BOUNDS.copy())

    @property
    def n(self):
        return len(self.coords)

    def cell_sizes(self):
        return (self.bounds[:, 1] - self.bounds[:, 0]) / np.asarray(self.extent)

    def centers(self):
        return self.bounds[:, 0] + (self.coords + 0.5) * self.cell_sizes()

    def occupancy(self) -> SparseTensor:
        return SparseTensor(self.coords, np.ones((self.n, 1)), self.extent)

    def all_centers(self):
        D, W, H = self.extent
        idx = np.stack(np.meshgrid(np.arange(D), np.arange(W), np.arange(H),
                                   indexing="ij"), axis=-1).reshape(-1, 3)
        return idx, self.bounds[:, 0] + (idx + 0.5) * self.cell_sizes()

    def occupancy_mask(self):
        D, W, H = self.extent
        mask = np.zeros(D * W * H, dtype=bool)
        if self.n:
            mask[linear_index(self.coords, self.extent)] = True
        return mask


def voxelize_gt(scene: SyntheticScene, extent, bounds=None) -> GroundTruth:
    """Occupy cells whose center lies within half a voxel diagonal of the
    surface; labels come from the nearest primitive, normals from the SDF
    gradient."""
    bounds = UNIT_BOUNDS.copy() if bounds is None else np.asarray(bounds, dtype=np.float64)
    extent = tuple(int(e) for e in extent)
    D, W, H = extent
    sizes = (bounds[:, 1] - bounds[:, 0]) / np.asarray(extent)
    half_diag = 0.5 * float(np.linalg.norm(sizes))
    idx = np.stack(np.meshgrid(np.arange(D), np.arange(W), np.arange(H),
                               indexing="ij"), axis=-1).reshape(-1, 3)
    centers = bounds[:, 0] + (idx + 0.5) * sizes
    sdf = scene.sdf(centers)
    occ = np.abs(sdf) <= half_diag
    coords = idx[occ].astype(np.int32)
    pts = centers[occ]
    labels = scene.labels(pts) if len(pts) else np.zeros(0, dtype=np.int64)
    normals = scene.normals(pts) if len(pts) else np.zeros((0, 3))
    return GroundTruth(coords=coords, labels=np.asarray(labels, dtype=np.int64),
                       normals=normals, extent=extent, bounds=bounds)


@dataclass
class ScenePair:
    points: np.ndarray        # sparse LiDAR-like input (N, 3), normalized frame
    gt: GroundTruth
    sensor_origin: np.ndarray
    seed: int


def make_scene_pair(seed, extent, spec: SceneSpec = SceneSpec(), n_beams=16,
                    n_azimuth=180, occlusion=True) -> ScenePair:
    scene = generate_scene(seed, spec)
    points = lidar_sample(scene, n_beams=n_beams, n_azimuth=n_azimuth,
                          occlusion=occlusion)
    gt = voxelize_gt(scene, extent)
    return ScenePair(points=points, gt=gt,
                     sensor_origin=np.asarray(scene.sensor_origin), seed=int(seed))


def rotation_z(angle_deg):
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment_rotate(pair: ScenePair, angle_deg) -> ScenePair:
    """Rotate input points, GT surface samples and normals about gravity.

    The rotated GT samples are re-binned onto the voxel grid, so the rotated
    occupancy is the resampled image of the original; duplicate target cells
    keep the first sample.
    """
    if not -45.0 <= angle_deg <= 45.0:
        raise ValueError("rotation angle outside [-45, 45] degrees")
    R = rotation_z(angle_deg)
    pts = pair.points @ R.T
    centers = pair.gt.centers() @ R.T
    normals = pair.gt.normals @ R.T
    sizes = pair.gt.cell_sizes()
    idx = np.floor((centers - pair.gt.bounds[:, 0]) / sizes).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.asarray(pair.gt.extent))).all(axis=1)
    idx, lab, nrm = idx[ok], pair.gt.labels[ok], normals[ok]
    keys = linear_index(idx, pair.gt.extent)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    gt = GroundTruth(coords=idx[first].astype(np.int32), labels=lab[first],
                     normals=nrm[first], extent=pair.gt.extent,
                     bounds=pair.gt.bounds.copy())
    return ScenePair(points=pts, gt=gt, sensor_origin=pair.sensor_origin @ R.T,
                     seed=pair.seed)


# ---------------------------------------------------------------------------
# dataset files

def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_scene_pair(scene_dir, pair: ScenePair):
    os.makedirs(scene_dir, exist_ok=True)
    _atomic_write(os.path.join(scene_dir, "points.f32"),
                  np.ascontiguousarray(pair.points, dtype="<f4").tobytes())
    feats = np.concatenate([pair.gt.labels[:, None].astype(np.float64),
                            pair.gt.normals], axis=1)
    gt_st = SparseTensor(pair.gt.coords, feats, pair.gt.extent)
    save_spt(os.path.join(scene_dir, "gt.spt"), gt_st)
    meta = [
        f"seed = {pair.seed}",
        f"sensor_origin = {pair.sensor_origin[0]:.9g},{pair.sensor_origin[1]:.9g},{pair.sensor_origin[2]:.9g}",
        f"extent = {pair.gt.extent[0]},{pair.gt.extent[1]},{pair.gt.extent[2]}",
        f"n_points = {len(pair.points)}",
        f"n_gt = {pair.gt.n}",
    ]
    _atomic_write(os.path.join(scene_dir, "meta.txt"), ("\n".join(meta) + "\n").encode())


def load_scene_pair(scene_dir) -> ScenePair:
    meta = {}
    meta_path = os.path.join(scene_dir, "meta.txt")
    if not os.path.exists(meta_path):
        raise DataError(f"{scene_dir}: missing meta.txt")
    with open(meta_path) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    pts = np.frombuffer(open(os.path.join(scene_dir, "points.f32"), "rb").read(),
                        dtype="<f4").astype(np.float64).reshape(-1, 3)
    gt_st = load_spt(os.path.join(scene_dir, "gt.spt"))
    labels = gt_st.feat_data[:, 0].astype(np.int64)
    normals = gt_st.feat_data[:, 1:4]
    gt = GroundTruth(coords=gt_st.coords, labels=labels, normals=normals,
                     extent=gt_st.extent)
    origin = np.array([float(v) for v in meta["sensor_origin"].split(",")])
    return ScenePair(points=pts, gt=gt, sensor_origin=origin, seed=int(meta["seed"]))


# ---------------------------------------------------------------------------
# SemanticKITTI-format loaders

def load_kitti_pointcloud(path, crop=KITTI_CROP):
    """Parse float32 (x, y, z, remission) records, crop, normalize to [-1,1]^3."""
    raw = open(path, "rb").read()
    if len(raw) % 16:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    crop = np.asarray(crop, dtype=np.float64)
    keep = ((pts >= crop[:, 0]) & (pts < crop[:, 1])).all(axis=1)
    pts = pts[keep]
    return 2.0 * (pts - crop[:, 0]) / (crop[:, 1] - crop[:, 0]) - 1.0


def unpack_voxel_bits(raw: bytes, extent=KITTI_EXTENT):
    """Bit-packed occupancy, 8 voxels per byte, most-significant bit first."""
    n = int(np.prod(extent))
    if len(raw) * 8 != n:
        raise DataError(f"occupancy bytes {len(raw)} do not match extent {extent}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="big")
    return bits.astype(bool)


def pack_voxel_bits(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=np.uint8), bitorder="big").tobytes()


def load_kitti_voxels(occ_path, label_path, extent=KITTI_EXTENT):
    """Occupancy bitmap plus little-endian uint16 labels, row-major (D, W, H)."""
    occ = unpack_voxel_bits(open(occ_path, "rb").read(), extent)
    raw_lab = open(label_path, "rb").read()
    n = int(np.prod(extent))
    if len(raw_lab) != 2 * n:
        raise DataError(f"{label_path}: expected {2 * n} bytes, found {len(raw_lab)}")
    labels = np.frombuffer(raw_lab, dtype="<u2")
    flat = np.flatnonzero(occ)
    D, W, H = extent
    coords = np.stack([flat // (W * H), (flat // H) % W, flat % H], axis=1).astype(np.int32)
    return coords, labels[flat].astype(np.int64), tuple(extent)
