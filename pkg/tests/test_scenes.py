import os

import numpy as np
import pytest

from scenesdf.errors import DataError
from scenesdf.scenes import (Box, Cylinder, KITTI_EXTENT, Plane, Sphere,
                             SyntheticScene, augment_rotate, generate_scene,
                             lidar_sample, load_kitti_pointcloud,
                             load_kitti_voxels, load_scene_pair,
                             make_scene_pair, pack_voxel_bits, save_scene_pair,
                             unpack_voxel_bits, voxelize_gt)


class TestPrimitives:
    def test_sphere_center_value(self):
        s = Sphere((0.1, -0.2, 0.0), 0.3)
        assert s.sdf(np.array([[0.1, -0.2, 0.0]]))[0] == pytest.approx(-0.3)

    def test_plane_is_exact_height(self):
        p = Plane((0, 0, 1.0), -0.5)
        pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
        assert np.allclose(p.sdf(pts), pts[:, 2] + 0.5)

    def test_union_below_components(self):
        scene = generate_scene(1)
        pts = np.random.default_rng(1).uniform(-1, 1, size=(200, 3))
        union = scene.sdf(pts)
        for prim in scene.prims:
            assert (union <= prim.sdf(pts) + 1e-12).all()

    @pytest.mark.parametrize("prim", [
        Sphere((0.1, 0.0, -0.2), 0.3),
        Box((0.0, 0.2, -0.1), (0.2, 0.3, 0.15)),
        Cylinder((-0.2, 0.1, 0.0), 0.15, 0.3),
        Plane((0, 0, 1.0), -0.5),
    ])
    def test_gradients_match_finite_differences(self, prim):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.8, 0.8, size=(200, 3))
        # stay away from gradient discontinuities (medial axes, corners)
        h = 1e-6
        g = prim.grad(pts)
        fd = np.zeros_like(pts)
        for a in range(3):
            pp = pts.copy()
            pp[:, a] += h
            pm = pts.copy()
            pm[:, a] -= h
            fd[:, a] = (prim.sdf(pp) - prim.sdf(pm)) / (2 * h)
        err = np.linalg.norm(g - fd, axis=1)
        assert np.median(err) < 1e-8
        assert (err < 1e-6).mean() > 0.95

    def test_scene_eikonal_property(self):
        scene = generate_scene(7)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(100_000, 3))
        norms = np.linalg.norm(scene.normals(pts), axis=1)
        assert abs(norms.mean() - 1.0) <= 1e-6

    def test_every_class_present(self):
        scene = generate_scene(11)
        labels = {p.label for p in scene.prims}
        assert labels == {1, 2, 3, 4, 5}

    def test_determinism(self):
        a, b = generate_scene(5), generate_scene(5)
        pts = np.random.default_rng(4).uniform(-1, 1, size=(50, 3))
        assert np.array_equal(a.sdf(pts), b.sdf(pts))


class TestLidar:
    def test_hits_lie_on_surface(self):
        scene = generate_scene(3)
        pts = lidar_sample(scene, n_beams=8, n_azimuth=40)
        assert len(pts) > 50
        assert np.abs(scene.sdf(pts)).max() <= 1e-4

    def test_occluded_far_hemisphere_unseen(self):
        scene = SyntheticScene(prims=[Sphere((0.5, 0.0, 0.0), 0.2)],
                               sensor_origin=(-0.5, 0.0, 0.0))
        pts = lidar_sample(scene, n_beams=12, n_azimuth=90, occlusion=True)
        assert len(pts) > 10
        assert (pts[:, 0] <= 0.5 + 1e-6).all()  # never behind the center plane

    def test_occlusion_hits_subset_of_free_hits(self):
        scene = generate_scene(9)
        on = lidar_sample(scene, n_beams=6, n_azimuth=30, occlusion=True)
        off = lidar_sample(scene, n_beams=6, n_azimuth=30, occlusion=False)
        on_set = {tuple(np.round(p, 7)) for p in on}
        off_set = {tuple(np.round(p, 7)) for p in off}
        assert on_set <= off_set
        assert len(off_set) > len(on_set)

    def test_ground_spacing_grows_with_distance(self):
        scene = SyntheticScene(prims=[Plane((0, 0, 1.0), -0.55)],
                               sensor_origin=(0.0, 0.0, -0.2))
        pts = lidar_sample(scene, n_beams=24, n_azimuth=8, occlusion=True)
        # along one azimuth, consecutive ring radii spread superlinearly
        ray = pts[np.abs(np.arctan2(pts[:, 1], pts[:, 0])) < 1e-6]
        r = np.sort(np.linalg.norm(ray[:, :2], axis=1))
        gaps = np.diff(r)
        assert len(gaps) >= 5
        x = r[:-1]
        slope = np.polyfit(x, gaps, 1)[0]
        assert slope > 0  # spacing increases with radial distance

    def test_origin_inside_solid_rejected(self):
        scene = SyntheticScene(prims=[Sphere((0, 0, 0), 0.5)],
                               sensor_origin=(0, 0, 0))
        with pytest.raises(ValueError):
            lidar_sample(scene)


class TestVoxelizeGt:
    def test_empty_scene_empty_gt(self):
        scene = SyntheticScene(prims=[Sphere((0, 0, 0), 0.001)])
        gt = voxelize_gt(SyntheticScene(prims=[Plane((0, 0, 1), -99.0)]), (8, 8, 8))
        assert gt.n == 0

    def test_plane_occupies_one_z_slab(self):
        # plane at the center of slab k=2 of 8: z = -1 + (2+0.5)/4
        z0 = -1 + 2.5 / 4
        gt = voxelize_gt(SyntheticScene(prims=[Plane((0, 0, 1.0), z0)]), (8, 8, 8))
        zs = np.unique(gt.coords[:, 2])
        # half-diagonal occupancy spans the slab plus direct neighbors at most
        assert set(zs) <= {1, 2, 3}
        assert 2 in zs
        slab = gt.coords[:, 2] == 2
        assert slab.sum() == 64  # full x-y coverage in the center slab

    def test_sphere_voxels_carry_sphere_class(self):
        scene = SyntheticScene(prims=[Plane((0, 0, 1.0), -0.9, label=1),
                                      Sphere((0, 0, 0.2), 0.3, label=5)])
        gt = voxelize_gt(scene, (16, 16, 16))
        centers = gt.centers()
        near_sphere = np.linalg.norm(centers - [0, 0, 0.2], axis=1) < 0.35
        assert (gt.labels[near_sphere] == 5).all()

    def test_normals_unit(self):
        gt = voxelize_gt(generate_scene(2), (16, 16, 8))
        norms = np.linalg.norm(gt.normals, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)


class TestAugment:
    def test_zero_angle_identity_on_points(self):
        pair = make_scene_pair(0, (16, 16, 8), n_beams=6, n_azimuth=30)
        out = augment_rotate(pair, 0.0)
        assert np.allclose(out.points, pair.points)
        assert np.allclose(out.gt.normals, pair.gt.normals)

    def test_45_degree_rotation_analytic(self):
        pair = make_scene_pair(0, (16, 16, 8), n_beams=6, n_azimuth=30)
        pair.points[0] = [1.0, 0.0, 0.0]
        out = augment_rotate(pair, 45.0)
        assert np.allclose(out.points[0], [np.sqrt(2) / 2, np.sqrt(2) / 2, 0.0])

    def test_normals_stay_unit(self):
        pair = make_scene_pair(1, (16, 16, 8), n_beams=6, n_azimuth=30)
        out = augment_rotate(pair, 30.0)
        assert np.allclose(np.linalg.norm(out.gt.normals, axis=1), 1.0, atol=1e-9)

    def test_angle_bounds_enforced(self):
        pair = make_scene_pair(1, (16, 16, 8), n_beams=6, n_azimuth=30)
        with pytest.raises(ValueError):
            augment_rotate(pair, 50.0)


class TestDatasetFiles:
    def test_roundtrip(self, tmp_path):
        pair = make_scene_pair(3, (16, 16, 8), n_beams=8, n_azimuth=40)
        d = tmp_path / "scene_0000"
        save_scene_pair(d, pair)
        back = load_scene_pair(d)
        assert np.allclose(back.points, pair.points.astype(np.float32))
        assert np.array_equal(back.gt.coords, pair.gt.coords[np.lexsort(
            (pair.gt.coords[:, 2], pair.gt.coords[:, 1], pair.gt.coords[:, 0]))])
        assert back.seed == 3

    def test_generation_deterministic_bytes(self, tmp_path):
        for sub in ("a", "b"):
            pair = make_scene_pair(9, (16, 16, 8), n_beams=8, n_azimuth=40)
            save_scene_pair(tmp_path / sub, pair)
        for name in ("points.f32", "gt.spt", "meta.txt"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, name


class TestKittiFormats:
    def test_sixteen_byte_file_is_one_point(self, tmp_path):
        p = tmp_path / "s.bin"
        p.write_bytes(np.array([10.0, 0.0, 0.0, 0.5], dtype="<f4").tobytes())
        pts = load_kitti_pointcloud(p)
        assert pts.shape == (1, 3)

    def test_empty_file_empty_set(self, tmp_path):
        p = tmp_path / "e.bin"
        p.write_bytes(b"")
        assert load_kitti_pointcloud(p).shape[0] == 0

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "t.bin"
        p.write_bytes(b"\x00" * 17)
        with pytest.raises(DataError):
            load_kitti_pointcloud(p)

    def test_crop_bounds_echo_and_normalization(self, tmp_path):
        pts = np.array([
            [51.3, 0.0, 0.0, 0.0],    # past the 51.2 m forward range
            [25.0, 25.7, 0.0, 0.0],   # past 25.6 m to the side
            [25.6, 0.0, 1.2, 0.0],    # inside: center x, center z
        ], dtype="<f4")
        p = tmp_path / "c.bin"
        p.write_bytes(pts.tobytes())
        out = load_kitti_pointcloud(p)
        assert out.shape == (1, 3)
        assert out[0, 0] == pytest.approx(0.0, abs=1e-6)   # 25.6 of 51.2
        assert out[0, 1] == pytest.approx(0.0, abs=1e-6)
        assert out[0, 2] == pytest.approx(0.0, abs=1e-6)   # 1.2 of [-2, 4.4]
        assert np.abs(out).max() <= 1.0

    def test_bit_unpack_msb_first(self):
        extent = (2, 2, 2)
        bits = unpack_voxel_bits(bytes([0b10000000]), extent)
        assert bits[0] and not bits[1:].any()

    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(5)
        mask = rng.random(KITTI_EXTENT[0] * 2) < 0.3  # any multiple of 8 works
        raw = pack_voxel_bits(mask)
        assert np.array_equal(unpack_voxel_bits(raw, (8, 8, KITTI_EXTENT[0] * 2 // 64)), mask)
        assert pack_voxel_bits(unpack_voxel_bits(raw, (8, 8, 8))) == raw

    def test_voxel_loader_shapes_and_labels(self, tmp_path):
        extent = (4, 4, 2)
        n = 32
        mask = np.zeros(n, bool)
        mask[[0, 5, 31]] = True
        occ_p = tmp_path / "v.bin"
        occ_p.write_bytes(pack_voxel_bits(mask))
        labels = np.arange(n, dtype="<u2")
        lab_p = tmp_path / "v.label"
        lab_p.write_bytes(labels.tobytes())
        coords, labs, ext = load_kitti_voxels(occ_p, lab_p, extent)
        assert ext == extent and len(coords) == 3
        assert labs.tolist() == [0, 5, 31]
        assert tuple(coords[0]) == (0, 0, 0)
        assert tuple(coords[2]) == (3, 3, 1)

    def test_kitti_extent_echo(self):
        assert KITTI_EXTENT == (256, 256, 32)
        assert 256 * 256 * 32 == np.prod(KITTI_EXTENT)

    def test_size_mismatch_rejected(self, tmp_path):
        occ_p = tmp_path / "w.bin"
        occ_p.write_bytes(b"\x00" * 3)
        lab_p = tmp_path / "w.label"
        lab_p.write_bytes(b"\x00" * 10)
        with pytest.raises(DataError):
            load_kitti_voxels(occ_p, lab_p, (4, 4, 2))
