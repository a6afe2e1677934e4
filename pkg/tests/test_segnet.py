import math

import numpy as np
import pytest
from helpers import brute_force_weight_map, max_rel_error

from fundus import ops
from fundus.segnet import (
    SegmenterConfig,
    UNetSegmenter,
    boundary_term,
    compute_weight_map,
    edge_pixels,
    weighted_cross_entropy,
)

IN_CHANNELS = 3


def expected_parameter_count(levels, base, skip_mode="halved", classes=2):
    """Closed-form parameter count built independently from the stage plan."""
    def block(c_in, c):
        return 9 * c_in * c + c + 9 * c * c + c

    def skip_ch(i):
        if skip_mode == "all":
            return base * 2**i
        if skip_mode == "halved":
            return base * 2**i if (levels - 1 - i) % 2 == 0 else 0
        return max(1, base * 2**i // 2)  # halfwidth

    total = 0
    c_prev = IN_CHANNELS
    for i in range(levels):
        total += block(c_prev, base * 2**i)
        c_prev = base * 2**i
    total += block(c_prev, base * 2**levels)
    for i in range(levels - 1, -1, -1):
        total += block(base * 2 ** (i + 1) + skip_ch(i), base * 2**i)
    total += base * classes + classes  # 1x1 head
    return total


class TestConfig:
    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            SegmenterConfig(input_size=60, levels=3).validate()

    def test_field_level_diagnostics(self):
        with pytest.raises(ValueError, match="levels"):
            SegmenterConfig(levels=0).validate()
        with pytest.raises(ValueError, match="base_channels"):
            SegmenterConfig(base_channels=0).validate()
        with pytest.raises(ValueError, match="skip_mode"):
            SegmenterConfig(skip_mode="none").validate()

    def test_halved_skips_every_other_level_deepest_first(self):
        assert SegmenterConfig(levels=3).skip_levels() == {2, 0}
        assert SegmenterConfig(levels=4).skip_levels() == {3, 1}
        assert SegmenterConfig(levels=2).skip_levels() == {1}
        assert SegmenterConfig(levels=3, skip_mode="all").skip_levels() == {0, 1, 2}


class TestBuild:
    @pytest.mark.parametrize("skip_mode", ["all", "halved", "halfwidth"])
    def test_parameter_count_closed_form(self, skip_mode):
        est = UNetSegmenter(
            input_size=64, levels=3, base_channels=8, skip_mode=skip_mode
        ).initialize()
        assert est.parameter_count() == expected_parameter_count(3, 8, skip_mode)

    def test_same_seed_bit_identical(self):
        a = UNetSegmenter(seed=11).initialize()
        b = UNetSegmenter(seed=11).initialize()
        for name in a.params_:
            assert np.array_equal(a.params_[name], b.params_[name])

    def test_different_seed_differs(self):
        a = UNetSegmenter(seed=11).initialize()
        b = UNetSegmenter(seed=12).initialize()
        assert any(not np.array_equal(a.params_[n], b.params_[n]) for n in a.params_)

    def test_invalid_config_rejected_on_use(self):
        with pytest.raises(ValueError, match="divisible"):
            UNetSegmenter(input_size=60, levels=3).initialize()


class TestWeightMap:
    def test_boundary_term_printed_form_values(self):
        # d1 + d2 = 2 sigma^2 = 50 at sigma 5: w0 * exp(-1)^2
        got = boundary_term(25.0, 25.0, w0=10.0, sigma=5.0, form="printed")
        assert got == pytest.approx(1.0 + 10 * math.exp(-2) - 1.0)
        assert got == pytest.approx(1.3533528323661271)

    def test_boundary_term_zero_distances(self):
        # the d1 = d2 = 0 case returns exactly w0 (so w = w_c + w0)
        assert boundary_term(0.0, 0.0, w0=10.0, sigma=5.0, form="printed") == 10.0
        assert boundary_term(0.0, 0.0, w0=10.0, sigma=5.0, form="squared") == 10.0

    def test_squared_form_differs_from_printed(self):
        printed = boundary_term(3.0, 4.0, w0=10.0, sigma=5.0, form="printed")
        squared = boundary_term(3.0, 4.0, w0=10.0, sigma=5.0, form="squared")
        assert printed == pytest.approx(10 * math.exp(-7 / 25.0))
        assert squared == pytest.approx(10 * math.exp(-49 / 50.0))

    def test_single_class_mask_returns_base_weights(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        wmap = compute_weight_map(mask, class_balance=False)
        assert np.array_equal(wmap, np.ones((8, 8)))
        balanced = compute_weight_map(mask, class_balance=True)
        assert np.array_equal(balanced, np.full((8, 8), 0.5))

    def test_matches_brute_force_oracle_exactly(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            mask = (rng.random((16, 16)) < rng.uniform(0.15, 0.85)).astype(np.uint8)
            got = compute_weight_map(mask, class_balance=True)
            want = brute_force_weight_map(mask, class_balance=True)
            assert np.array_equal(got, want)

    def test_reflection_symmetry(self, rng):
        mask = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        wmap = compute_weight_map(mask)
        assert np.array_equal(compute_weight_map(mask[:, ::-1]), wmap[:, ::-1])
        assert np.array_equal(compute_weight_map(mask[::-1, :]), wmap[::-1, :])

    def test_weights_bounded_below_by_min_class_weight(self, rng):
        mask = (rng.random((10, 10)) < 0.3).astype(np.uint8)
        wmap = compute_weight_map(mask, class_balance=True)
        freq1 = mask.mean()
        wc_min = min(0.5 / freq1, 0.5 / (1 - freq1))
        assert wmap.min() >= wc_min

    def test_edge_pixels_four_connectivity(self):
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[1, 1] = 1
        edges = edge_pixels(mask)
        want = np.array(
            [[False, True, False], [True, True, True], [False, True, False]]
        )
        assert np.array_equal(edges, want)


class TestWeightedCrossEntropy:
    def test_perfect_prediction_zero_loss(self):
        mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        probs = np.zeros((2, 2, 2))
        probs[..., 0] = 1.0 - mask
        probs[..., 1] = mask
        loss, grad = weighted_cross_entropy(probs, mask, np.ones((2, 2)))
        assert loss == 0.0

    def test_uniform_prediction_log_two(self):
        mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        probs = np.full((2, 2, 2), 0.5)
        loss, _ = weighted_cross_entropy(probs, mask, np.ones((2, 2)))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        mask = (rng.random((5, 5)) < 0.5).astype(np.uint8)
        wmap = rng.uniform(0.5, 3.0, size=(5, 5))
        logits = rng.normal(size=(5, 5, 2))
        probs = ops.softmax_channels(logits)
        _, grad = weighted_cross_entropy(probs, mask, wmap)
        eps = 1e-4
        worst = 0.0
        flat = logits.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = weighted_cross_entropy(ops.softmax_channels(logits), mask, wmap)[0]
            flat[i] = orig - eps
            lm = weighted_cross_entropy(ops.softmax_channels(logits), mask, wmap)[0]
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6))
        assert worst < 1e-4

    def test_unnormalized_probs_rejected(self):
        mask = np.zeros((2, 2), dtype=np.uint8)
        with pytest.raises(ValueError, match="normalized"):
            weighted_cross_entropy(np.full((2, 2, 2), 0.4), mask, np.ones((2, 2)))


class TestEndToEndGradient:
    def test_every_parameter_matches_central_differences(self):
        # Constant input keeps translation-equal activations and gives clean
        # margins around the ReLU/pool kinks; net seed 0 was verified to keep
        # every pre-activation away from the eps = 1e-4 crossing window.
        est = UNetSegmenter(
            input_size=16, levels=2, base_channels=4, skip_mode="halved", seed=0
        ).initialize()
        img = np.full((16, 16, 3), 0.6)
        mask = (np.random.default_rng(7).random((16, 16)) < 0.3).astype(np.uint8)
        wmap = compute_weight_map(mask)

        cache = {}
        logits = est.forward_logits(img, cache)
        _, grad_logits = weighted_cross_entropy(ops.softmax_channels(logits), mask, wmap)
        grads = est.backward(grad_logits, cache)

        def loss():
            out = est.forward_logits(img)
            return weighted_cross_entropy(ops.softmax_channels(out), mask, wmap)[0]

        eps = 1e-4
        worst = 0.0
        for name, p in est.params_.items():
            flat = p.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = loss()
                flat[i] = orig - eps
                lm = loss()
                flat[i] = orig
                fd = (lp - lm) / (2 * eps)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6)
                worst = max(worst, rel)
        assert worst <= 1e-3

    @pytest.mark.parametrize("skip_mode", ["all", "halfwidth"])
    def test_other_skip_modes_match_directional_derivative(self, skip_mode):
        # cheap smoke for the remaining skip wirings: whole-vector directional
        # derivative at a tiny step, immune to kink noise at the 1e-6 scale
        est = UNetSegmenter(
            input_size=8, levels=2, base_channels=2, skip_mode=skip_mode, seed=1
        ).initialize()
        rng = np.random.default_rng(2)
        img = rng.random((8, 8, 3))
        mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        wmap = compute_weight_map(mask)
        cache = {}
        logits = est.forward_logits(img, cache)
        _, gl = weighted_cross_entropy(ops.softmax_channels(logits), mask, wmap)
        grads = est.backward(gl, cache)
        direction = {k: rng.normal(size=v.shape) for k, v in est.params_.items()}
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in grads)
        eps = 1e-6
        for k in est.params_:
            est.params_[k] += eps * direction[k]
        lp = weighted_cross_entropy(
            ops.softmax_channels(est.forward_logits(img)), mask, wmap
        )[0]
        for k in est.params_:
            est.params_[k] -= 2 * eps * direction[k]
        lm = weighted_cross_entropy(
            ops.softmax_channels(est.forward_logits(img)), mask, wmap
        )[0]
        fd = (lp - lm) / (2 * eps)
        assert abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-9) < 1e-6


class TestTrainingAndInference:
    def test_all_background_pair_converges(self):
        est = UNetSegmenter(
            input_size=16, levels=2, base_channels=4, seed=0,
            max_epochs=50, stop_loss=1e-3, augment=False,
        )
        rng = np.random.default_rng(0)
        img = rng.random((16, 16, 3))
        mask = np.zeros((16, 16), dtype=np.uint8)
        est.fit([img], [mask])
        assert est.report_.stop_reason == "converged"
        assert est.report_.epochs_run <= 50
        assert np.array_equal(est.predict(img), mask)

    def test_zero_learning_rate_constant_loss(self):
        est = UNetSegmenter(
            input_size=16, levels=2, base_channels=4, seed=0,
            lr=0.0, max_epochs=4, augment=False,
        )
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3))
        mask = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        est.fit([img], [mask])
        curve = est.report_.loss_curve
        assert len(curve) == 4
        assert max(curve) - min(curve) == 0.0

    def test_training_deterministic_bitwise(self):
        rng = np.random.default_rng(3)
        imgs = [rng.random((16, 16, 3)) for _ in range(3)]
        masks = [(rng.random((16, 16)) < 0.3).astype(np.uint8) for _ in range(3)]

        def run():
            est = UNetSegmenter(
                input_size=16, levels=2, base_channels=4, seed=5,
                max_epochs=3, augment=True, augment_seed=9,
            )
            est.fit(imgs, masks)
            return est.report_.loss_curve, est.params_

        curve_a, params_a = run()
        curve_b, params_b = run()
        assert curve_a == curve_b
        for k in params_a:
            assert np.array_equal(params_a[k], params_b[k])

    def test_trains_on_own_training_image(self):
        rng = np.random.default_rng(4)
        img = np.full((16, 16, 3), 0.2)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:12, 7:9] = 1
        img[mask == 1] += 0.5
        img += rng.normal(0, 0.01, img.shape)
        img = np.clip(img, 0, 1)
        est = UNetSegmenter(
            input_size=16, levels=2, base_channels=4, seed=0,
            max_epochs=40, augment=False,
        )
        est.fit([img], [mask])
        pred = est.predict(img)
        assert (pred == mask).mean() >= 0.9

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            UNetSegmenter(input_size=16, levels=2, base_channels=4).fit([], [])

    def test_untrained_symmetric_net_ties_to_class_zero(self):
        est = UNetSegmenter(input_size=16, levels=2, base_channels=4, seed=0).initialize()
        for k in est.params_:
            est.params_[k] = np.zeros_like(est.params_[k])
        img = np.full((16, 16, 3), 0.5)
        pred = est.predict(img)
        assert np.array_equal(pred, np.zeros((16, 16), dtype=np.uint8))

    def test_mask_dims_equal_input_dims(self, rng):
        est = UNetSegmenter(input_size=16, levels=2, base_channels=4, seed=0).initialize()
        pred = est.predict(rng.random((16, 16, 3)))
        assert pred.shape == (16, 16)

    def test_wrong_size_rejected(self, rng):
        est = UNetSegmenter(input_size=16, levels=2, base_channels=4, seed=0).initialize()
        with pytest.raises(ValueError, match="spatial size"):
            est.predict(rng.random((32, 32, 3)))

    def test_divergence_aborts_with_last_good_report(self, rng):
        est = UNetSegmenter(
            input_size=16, levels=2, base_channels=4, seed=0,
            lr=1e9, max_epochs=10, augment=False,
        )
        img = rng.random((16, 16, 3))
        mask = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        with pytest.warns(UserWarning, match="diverged"):
            est.fit([img], [mask])
        assert est.report_.stop_reason == "diverged"
        assert len(est.report_.loss_curve) == est.report_.epochs_run
        assert all(np.isfinite(p).all() for p in est.params_.values())
