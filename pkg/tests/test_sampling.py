import numpy as np
import pytest

from scenesdf import autodiff as ad
from scenesdf.sampling import (ShapeEmbeddingVolume, embedding_volume,
                               encoding_dim, nearest_sample, positional_encode,
                               positional_encode_jacobian, trilinear_backward,
                               trilinear_dx, trilinear_sample, trilinear_weights)
from scenesdf.scenes import UNIT_BOUNDS
from scenesdf.sparse import SparseTensor


def make_volume(extent, d, seed=0):
    rng = np.random.default_rng(seed)
    cells = int(np.prod(extent))
    return ShapeEmbeddingVolume(rows=rng.normal(size=(cells, d)), extent=extent,
                                bounds=UNIT_BOUNDS.copy())


def centers(vol):
    out = []
    D, W, H = vol.extent
    sizes = vol.cell_sizes()
    for i in range(D):
        for j in range(W):
            for k in range(H):
                out.append(vol.bounds[:, 0] + (np.array([i, j, k]) + 0.5) * sizes)
    return np.array(out)


def hat_oracle(x, vol):
    """Literal triple loop over every center with product hat weights."""
    D, W, H = vol.extent
    g = vol.to_grid(x)[0]
    out = np.zeros(vol.channels)
    for m in range(D):
        for n in range(W):
            for k in range(H):
                w = max(0.0, 1 - abs(g[0] - m)) * max(0.0, 1 - abs(g[1] - n)) \
                    * max(0.0, 1 - abs(g[2] - k))
                out += w * vol.row_data[(m * W + n) * H + k]
    return out


class TestTrilinearForward:
    def test_query_at_center_returns_that_embedding(self):
        vol = make_volume((4, 4, 2), 3)
        cs = centers(vol)
        for idx in (0, 5, 17, 31):
            e, _ = trilinear_sample(cs[idx][None], vol)
            assert np.allclose(e[0], vol.row_data[idx], atol=1e-12)

    def test_midpoint_of_adjacent_centers_is_mean(self):
        vol = make_volume((4, 4, 4), 2)
        sizes = vol.cell_sizes()
        c = vol.bounds[:, 0] + (np.array([1, 2, 2]) + 0.5) * sizes
        mid = c + np.array([sizes[0] / 2, 0, 0])
        e, _ = trilinear_sample(mid[None], vol)
        r1 = vol.row_data[(1 * 4 + 2) * 4 + 2]
        r2 = vol.row_data[(2 * 4 + 2) * 4 + 2]
        assert np.allclose(e[0], 0.5 * (r1 + r2), atol=1e-12)

    def test_random_interior_matches_scalar_loop_oracle(self):
        vol = make_volume((5, 4, 3), 4, seed=3)
        rng = np.random.default_rng(4)
        sizes = vol.cell_sizes()
        lo = vol.bounds[:, 0] + 0.5 * sizes
        hi = vol.bounds[:, 1] - 0.5 * sizes
        pts = rng.uniform(lo, hi, size=(50, 3))
        e, _ = trilinear_sample(pts, vol)
        for i, p in enumerate(pts):
            assert np.abs(e[i] - hat_oracle(p[None], vol)).max() <= 1e-12

    def test_partition_of_unity_interior(self):
        vol = make_volume((6, 6, 4), 1)
        rng = np.random.default_rng(5)
        sizes = vol.cell_sizes()
        pts = rng.uniform(vol.bounds[:, 0] + 0.5 * sizes,
                          vol.bounds[:, 1] - 0.5 * sizes, size=(200, 3))
        rec = trilinear_weights(pts, vol)
        assert np.allclose(rec.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_continuity_across_cell_faces(self):
        vol = make_volume((6, 6, 4), 3, seed=6)
        sizes = vol.cell_sizes()
        scale = np.linalg.norm(vol.row_data, axis=1).mean()
        for axis in range(3):
            face = vol.bounds[axis, 0] + 2 * sizes[axis] + 0.5 * sizes[axis]
            p = np.array([0.1, -0.05, 0.02])
            pa = p.copy()
            pa[axis] = face - 1e-9
            pb = p.copy()
            pb[axis] = face + 1e-9
            ea, _ = trilinear_sample(pa[None], vol)
            eb, _ = trilinear_sample(pb[None], vol)
            assert np.abs(ea - eb).max() <= 1e-6 * scale

    def test_h_equal_one_degrades_to_bilinear(self):
        vol = make_volume((4, 4, 1), 2, seed=7)
        rng = np.random.default_rng(8)
        pts = rng.uniform(-0.9, 0.9, size=(20, 3))
        e, rec = trilinear_sample(pts, vol)
        assert np.allclose(rec.weights.sum(axis=1), 1.0, atol=1e-12)
        flat = pts.copy()
        flat[:, 2] = 0.33  # any z gives the same answer when H = 1
        e2, _ = trilinear_sample(flat, vol)
        assert np.allclose(e, e2, atol=1e-12)

    def test_out_of_bounds_clamped_and_flagged(self):
        vol = make_volume((4, 4, 4), 2)
        e, rec = trilinear_sample(np.array([[1.5, 0.0, 0.0]]), vol)
        assert rec.n_out_of_bounds == 1
        edge, _ = trilinear_sample(np.array([[1.0 - 1e-12, 0.0, 0.0]]), vol)
        assert np.allclose(e, edge, atol=1e-9)

    def test_nearest_sample_returns_nearest_center(self):
        vol = make_volume((4, 4, 4), 3)
        cs = centers(vol)
        e, lin = nearest_sample(cs[7][None] + 0.01, vol)
        assert lin[0] == 7
        assert np.allclose(e[0], vol.row_data[7])


class TestTrilinearBackward:
    def test_center_query_routes_gradient_to_one_voxel(self):
        vol = make_volume((3, 3, 3), 2)
        cs = centers(vol)
        _, rec = trilinear_sample(cs[13][None], vol)
        grows, gx = trilinear_backward(np.ones((1, 2)), rec, vol)
        nz = np.flatnonzero(np.abs(grows).sum(axis=1))
        assert nz.tolist() == [13]
        assert np.allclose(grows[13], 1.0)

    def test_zero_cotangent_gives_zero_grads(self):
        vol = make_volume((3, 3, 3), 2)
        _, rec = trilinear_sample(np.array([[0.1, 0.2, -0.3]]), vol)
        grows, gx = trilinear_backward(np.zeros((1, 2)), rec, vol)
        assert not grows.any() and not gx.any()

    def test_backward_is_forward_weights_transposed(self):
        vol = make_volume((4, 3, 3), 3, seed=9)
        rng = np.random.default_rng(10)
        pts = rng.uniform(-0.8, 0.8, size=(10, 3))
        _, rec = trilinear_sample(pts, vol)
        cells = int(np.prod(vol.extent))
        W = np.zeros((len(pts), cells))
        for p in range(len(pts)):
            for k in range(8):
                W[p, rec.lin[p, k]] += rec.weights[p, k]
        ge = rng.normal(size=(len(pts), 3))
        grows, _ = trilinear_backward(ge, rec, vol)
        assert np.allclose(grows, W.T @ ge, atol=1e-12)

    def test_matches_finite_differences(self):
        vol = make_volume((5, 4, 3), 3, seed=11)
        rng = np.random.default_rng(12)
        sizes = vol.cell_sizes()
        pts = rng.uniform(vol.bounds[:, 0] + 0.6 * sizes,
                          vol.bounds[:, 1] - 0.6 * sizes, size=(5, 3))
        # keep queries away from cell boundaries for the x-derivative check
        g = vol.to_grid(pts)
        frac = g - np.floor(g)
        pts = pts[np.all((frac > 0.15) & (frac < 0.85), axis=1)]
        assert len(pts) > 0
        _, rec = trilinear_sample(pts, vol)
        ge = rng.normal(size=(len(pts), vol.channels))
        grows, gx = trilinear_backward(ge, rec, vol)
        h = 1e-6

        def f(rows, q):
            v = ShapeEmbeddingVolume(rows=rows, extent=vol.extent, bounds=vol.bounds)
            e, _ = trilinear_sample(q, v)
            return float(np.sum(np.asarray(e) * ge))

        for _ in range(8):
            r = rng.integers(grows.shape[0])
            c = rng.integers(grows.shape[1])
            rp = vol.row_data.copy()
            rp[r, c] += h
            rm = vol.row_data.copy()
            rm[r, c] -= h
            fd = (f(rp, pts) - f(rm, pts)) / (2 * h)
            assert abs(grows[r, c] - fd) <= 1e-6 * max(1.0, abs(fd))
        for p in range(len(pts)):
            for axis in range(3):
                qp = pts.copy()
                qp[p, axis] += h
                qm = pts.copy()
                qm[p, axis] -= h
                fd = (f(vol.row_data, qp) - f(vol.row_data, qm)) / (2 * h)
                assert abs(gx[p, axis] - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_taped_dx_agrees_with_explicit_backward(self):
        vol_rows = np.random.default_rng(13).normal(size=(4 * 4 * 4, 2))
        tape = ad.Tape()
        vol = ShapeEmbeddingVolume(rows=tape.leaf(vol_rows), extent=(4, 4, 4),
                                   bounds=UNIT_BOUNDS.copy())
        pts = np.array([[0.12, -0.3, 0.41]])
        e, rec = trilinear_sample(pts, vol)
        dx = trilinear_dx(vol, rec)
        plain = ShapeEmbeddingVolume(rows=vol_rows, extent=(4, 4, 4),
                                     bounds=UNIT_BOUNDS.copy())
        for axis in range(3):
            ge = np.zeros((1, 2))
            for c in range(2):
                ge[0, c] = 1.0
                _, gx = trilinear_backward(ge, rec, plain)
                assert ad._data(dx[axis])[0, c] == pytest.approx(gx[0, axis], abs=1e-12)
                ge[0, c] = 0.0


class TestEmbeddingVolume:
    def test_from_sparse_fills_absent_cells_with_zeros(self):
        st = SparseTensor([[0, 0, 0], [1, 1, 0]], [[1.0, 2.0], [3.0, 4.0]], (2, 2, 1))
        vol = embedding_volume(st, UNIT_BOUNDS)
        assert vol.rows.shape == (4, 2)
        assert np.allclose(vol.rows[0], [1, 2])
        assert np.allclose(vol.rows[3], [3, 4])
        assert np.allclose(vol.rows[1], 0) and np.allclose(vol.rows[2], 0)

    def test_dense_layout(self):
        st = SparseTensor([[1, 0, 1]], [[5.0]], (2, 2, 2))
        vol = embedding_volume(st, UNIT_BOUNDS)
        d = vol.dense()
        assert d.shape == (1, 2, 2, 2)
        assert d[0, 1, 0, 1] == 5.0 and np.count_nonzero(d) == 1


class TestPositionalEncoding:
    def test_zero_point_level_two(self):
        enc = positional_encode(np.zeros((1, 3)), levels=2, include_xyz=False)
        assert enc.shape == (1, 12)
        assert np.allclose(enc[0, :4], [0, 1, 0, 1])  # sin0, cos0 at both octaves

    def test_half_gives_sin_pi_over_two(self):
        enc = positional_encode(np.array([[0.5, 0.0, 0.0]]), levels=1,
                                include_xyz=False)
        assert enc[0, 0] == pytest.approx(1.0)   # sin(pi/2)
        assert enc[0, 1] == pytest.approx(0.0, abs=1e-15)  # cos(pi/2)

    def test_dim_law_and_63_dim_case(self):
        assert encoding_dim(10, True) == 63
        x = np.random.default_rng(0).uniform(-1, 1, size=(7, 3))
        assert positional_encode(x, 10, True).shape == (7, 63)
        for L in range(0, 6):
            assert positional_encode(x, L, False).shape == (7, 3 * 2 * L)
            assert encoding_dim(L, False) == 3 * 2 * L

    def test_components_bounded(self):
        x = np.random.default_rng(1).uniform(-1, 1, size=(100, 3))
        enc = positional_encode(x, 8, include_xyz=False)
        assert np.abs(enc).max() <= 1.0 + 1e-12

    def test_include_xyz_prepends_raw_coordinates(self):
        x = np.array([[0.25, -0.5, 0.75]])
        enc = positional_encode(x, 2, include_xyz=True)
        assert np.allclose(enc[0, :3], x[0])


class TestEncodingJacobian:
    def test_zero_point_first_octave(self):
        jac = positional_encode_jacobian(np.zeros((1, 3)), 1, include_xyz=False)
        assert jac[0, 0, 0] == pytest.approx(np.pi)      # d sin(pi p)/dp at 0
        assert jac[0, 1, 0] == pytest.approx(0.0)        # d cos(pi p)/dp at 0

    def test_identity_rows_for_raw_xyz(self):
        jac = positional_encode_jacobian(np.zeros((1, 3)), 0, include_xyz=True)
        assert jac.shape == (1, 3, 3)
        assert np.allclose(jac[0], np.eye(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, size=(4, 3))
        jac = positional_encode_jacobian(x, 5, include_xyz=True)
        h = 1e-7
        for axis in range(3):
            xp = x.copy()
            xp[:, axis] += h
            xm = x.copy()
            xm[:, axis] -= h
            fd = (positional_encode(xp, 5, True) - positional_encode(xm, 5, True)) / (2 * h)
            rel = np.abs(jac[:, :, axis] - fd) / np.maximum(np.abs(fd), 1.0)
            assert rel.max() <= 1e-7
