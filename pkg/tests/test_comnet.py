import numpy as np
import pytest

from scenesdf import autodiff as ad
from scenesdf.comnet import (ComNetConfig, completion_loss, comnet_forward,
                             init_comnet_params, pruning_targets_from_gt,
                             validate_extent)
from scenesdf.errors import ConfigError
from scenesdf.scenes import UNIT_BOUNDS
from scenesdf.sparse import SparseTensor, voxelize

TINY = ComNetConfig(tiers=2, channels=(3, 4), d_se=4, b=2)


def occupancy_of(points, extent):
    return voxelize(points, extent, UNIT_BOUNDS)


def random_occ(rng, extent, density=0.15):
    D, W, H = extent
    mask = rng.random((D, W, H)) < density
    coords = np.argwhere(mask).astype(np.int32)
    return SparseTensor(coords, np.ones((len(coords), 1)), extent)


class TestExtentLaw:
    def test_paper_scale_embedding_extent(self):
        cfg = ComNetConfig(tiers=6, channels=(16, 32, 64, 128, 256, 512),
                           d_se=256, b=4)
        assert validate_extent(cfg, (256, 256, 32)) == (64, 64, 8)

    def test_desk_scale_hand_trace(self):
        # 32x32x8 halves twice to 8x8x2 at the deepest encoder tier, the
        # decoder restores 32x32x8, and the b=4 pooling leaves 8x8x2.
        cfg = ComNetConfig(tiers=3, channels=(4, 8, 16), d_se=8, b=4)
        assert validate_extent(cfg, (32, 32, 8)) == (8, 8, 2)

    def test_indivisible_extent_rejected(self):
        cfg = ComNetConfig(tiers=3, channels=(4, 8, 16), d_se=8, b=4)
        with pytest.raises(ConfigError):
            validate_extent(cfg, (32, 32, 6))

    def test_extent_law_holds_for_random_accepted_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            tiers = int(rng.integers(2, 5))
            b = int(rng.choice([2, 4]))
            unit = max(2 ** (tiers - 1), b)
            extent = tuple(int(unit * rng.integers(1, 5)) for _ in range(3))
            cfg = ComNetConfig(tiers=tiers, channels=tuple([4] * tiers), d_se=4, b=b)
            if any(e % unit for e in extent):
                continue
            assert validate_extent(cfg, extent) == tuple(e // b for e in extent)

    def test_forward_respects_extent_division(self):
        params = init_comnet_params(TINY, seed=0)
        occ = random_occ(np.random.default_rng(1), (8, 8, 4))
        out = comnet_forward(occ, TINY, params)
        assert out.se.extent == (4, 4, 2)
        assert out.se.m == TINY.d_se


class TestEmptyInput:
    def test_empty_occupancy_gives_empty_volume_and_zero_loss(self):
        params = init_comnet_params(TINY, seed=0)
        occ = SparseTensor(np.zeros((0, 3)), np.zeros((0, 1)), (8, 8, 4))
        gt = SparseTensor(np.zeros((0, 3)), np.zeros((0, 1)), (8, 8, 4))
        targets = pruning_targets_from_gt(gt, [1])
        out = comnet_forward(occ, TINY, params, targets=targets)
        assert out.se.n == 0
        assert float(ad._data(completion_loss(out.tier_logits))) == 0.0


class TestPruningTargets:
    def test_full_grid_all_positive(self):
        coords = np.argwhere(np.ones((4, 4, 2), bool))
        gt = SparseTensor(coords, np.ones((len(coords), 1)), (4, 4, 2))
        t = pruning_targets_from_gt(gt, [1, 2])
        assert t.labels_for(coords, 1).all()
        coarse = np.argwhere(np.ones((2, 2, 1), bool))
        assert t.labels_for(coarse, 2).all()

    def test_empty_gt_all_zero(self):
        gt = SparseTensor(np.zeros((0, 3)), np.zeros((0, 1)), (4, 4, 2))
        t = pruning_targets_from_gt(gt, [1, 2])
        assert not t.labels_for(np.array([[0, 0, 0], [1, 1, 1]]), 1).any()

    def test_random_matches_any_reduction_oracle(self):
        rng = np.random.default_rng(2)
        gt = random_occ(rng, (8, 8, 4), density=0.2)
        t = pruning_targets_from_gt(gt, [2])
        coarse = np.argwhere(np.ones((4, 4, 2), bool))
        labels = t.labels_for(coarse, 2)
        gt_set = {tuple(c) for c in gt.coords}
        for c, lab in zip(coarse, labels):
            # positive iff any fine-grid cell inside the 2^3 block is occupied
            exists = any(tuple(2 * c + np.array([a, b, d])) in gt_set
                         for a in range(2) for b in range(2) for d in range(2))
            assert bool(lab) == exists


class TestCompletionLoss:
    def test_perfect_prediction_at_clamp_is_tiny(self):
        logits = ad.Tape().leaf(np.array([40.0, -40.0]))
        labels = np.array([1.0, 0.0])
        loss = completion_loss([(1, logits, labels)], eps=1e-7)
        assert float(ad._data(loss)) <= 2e-7

    def test_half_probability_is_ln2(self):
        logits = ad.Tape().leaf(np.zeros(5))
        labels = np.ones(5)
        loss = completion_loss([(1, logits, labels)])
        assert float(ad._data(loss)) == pytest.approx(np.log(2), abs=1e-12)

    def test_random_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        tape = ad.Tape()
        tiers = []
        for stride in (1, 2, 4):
            n = int(rng.integers(3, 9))
            logits = rng.normal(size=n)
            labels = (rng.random(n) < 0.5).astype(float)
            tiers.append((stride, tape.leaf(logits), labels))
        loss = float(ad._data(completion_loss(tiers)))
        acc = 0.0
        for _stride, logits, labels in tiers:  # per-element scalar loop
            block = 0.0
            z = ad._data(logits)
            for j in range(len(labels)):
                p = 1.0 / (1.0 + np.exp(-z[j]))
                p = min(max(p, 1e-7), 1 - 1e-7)
                block += labels[j] * np.log(p) + (1 - labels[j]) * np.log(1 - p)
            acc += -block / len(labels)
        assert loss == pytest.approx(acc / len(tiers), abs=1e-12)


class TestForwardBehaviour:
    def test_deterministic_forward(self):
        params = init_comnet_params(TINY, seed=4)
        occ = random_occ(np.random.default_rng(5), (8, 8, 4))
        a = comnet_forward(occ, TINY, params)
        b = comnet_forward(occ, TINY, params)
        assert np.array_equal(a.se.coords, b.se.coords)
        assert np.array_equal(a.se.feat_data, b.se.feat_data)

    def test_teacher_forcing_pins_decoder_coordinates_to_gt(self):
        # the input itself coarse-covers the target, so forcing must
        # reproduce the target occupancy at every supervised resolution
        rng = np.random.default_rng(6)
        gt = random_occ(rng, (8, 8, 4), density=0.3)
        params = init_comnet_params(TINY, seed=7)
        targets = pruning_targets_from_gt(gt, [1])
        out = comnet_forward(gt, TINY, params, targets=targets, teacher_force=True)
        got = {tuple(c) for c in out.tier_coords[1]}
        assert got == {tuple(c) for c in gt.coords}

    def test_pruning_placement_variants(self):
        cfg3 = ComNetConfig(tiers=3, channels=(3, 4, 5), d_se=4, b=2, pruning="last:1")
        params = init_comnet_params(cfg3, seed=8)
        occ = random_occ(np.random.default_rng(9), (8, 8, 8))
        gt = random_occ(np.random.default_rng(10), (8, 8, 8), density=0.3)
        out = comnet_forward(occ, cfg3, params,
                             targets=pruning_targets_from_gt(gt, [1, 2]))
        assert len(out.tier_logits) == 1  # only the finest tier is supervised
        assert out.tier_logits[0][0] == 1
        assert cfg3.pruned_tiers() == {1}
        assert ComNetConfig(tiers=3, channels=(3, 4, 5), d_se=4, b=2).pruned_tiers() == {1, 2}

    def test_channel_mismatch_rejected(self):
        params = init_comnet_params(TINY, seed=0)
        occ = SparseTensor([[0, 0, 0]], [[1.0, 2.0]], (8, 8, 4))
        with pytest.raises(ConfigError):
            comnet_forward(occ, TINY, params)


class TestParameterGradients:
    def test_completion_loss_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        occ = random_occ(rng, (8, 8, 4), density=0.25)
        gt = random_occ(rng, (8, 8, 4), density=0.3)
        targets = pruning_targets_from_gt(gt, [1])
        base = init_comnet_params(TINY, seed=12)

        def loss_of(params):
            tape = ad.Tape()
            lifted = {k: tape.leaf(v) for k, v in params.items()}
            out = comnet_forward(occ, TINY, lifted, targets=targets,
                                 teacher_force=True)
            return completion_loss(out.tier_logits), lifted, tape

        loss, lifted, tape = loss_of(base)
        tape.backward(loss)
        h = 1e-5
        rng2 = np.random.default_rng(13)
        names = sorted(base)
        for _ in range(12):
            name = names[rng2.integers(len(names))]
            arr = base[name]
            idx = np.unravel_index(rng2.integers(arr.size), arr.shape)
            analytic = lifted[name].grad[idx] if lifted[name].grad is not None else 0.0
            pp = {k: v.copy() for k, v in base.items()}
            pp[name][idx] += h
            lp, _, _ = loss_of(pp)
            pp[name][idx] -= 2 * h
            lm, _, _ = loss_of(pp)
            fd = (float(ad._data(lp)) - float(ad._data(lm))) / (2 * h)
            assert abs(analytic - fd) <= 1e-4 * max(abs(fd), abs(analytic), 1e-4)
