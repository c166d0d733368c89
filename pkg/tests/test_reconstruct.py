import dataclasses

import numpy as np
import pytest

from conftest import (
    central_difference,
    filter_apply_oracle,
    loss_b_oracle,
    loss_c_oracle,
    relative_error,
)
from ecall.config import (
    PHASE1_WEIGHTS,
    PHASE2_WEIGHTS,
    PHASE3_WEIGHTS,
    EcallConfig,
    EcallWeights,
    PhaseConfig,
    SupervisedConfig,
    full_scale,
)
from ecall.datagen import gaussian_kernel, generate_dataset, synthetic_textures
from ecall.errors import DimensionMismatch, NonNegligibleImaginaryPart
from ecall.kernel import delta_kernel, loss_A, sample_mask
from ecall.metrics import mnc, psnr
from ecall.reconstruct import (
    EcallTrainer,
    SpectralFilter,
    apply,
    grad_loss_B,
    grad_loss_C,
    loss_B,
    loss_C,
    supervised_baseline,
    total_loss,
    train_three_phase,
    wiener_filter,
    wiener_zero_bins,
)
from ecall.stats import bundle_of
from ecall.tensor import convolve_periodic, kernel_spectrum

W_B = EcallWeights(lambda_b1=0.7, lambda_b2=1.3)
W_C = EcallWeights(lambda_c1=0.4, lambda_c2=2.0)


def random_gains(rng, h, w):
    return rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))


@pytest.fixture
def batch(rng):
    n, c, h, w = 2, 2, 8, 8
    return (rng.standard_normal((3, 3)), random_gains(rng, h, w), rng.random((n, c, h, w)),
            0.1 * rng.standard_normal((n, c, h, w)), rng.random((n, c, h, w)))


class TestWiener:
    def test_delta_is_identity(self, rng):
        f = wiener_filter(delta_kernel(5), 0.0, 12, 10)
        np.testing.assert_allclose(f.gains, 1, atol=1e-15)
        img = rng.random((2, 12, 10))
        np.testing.assert_allclose(apply(f, img), img, atol=1e-12)

    def test_restores_medium_blur(self):
        x = synthetic_textures(1, 64, 64, np.random.default_rng(11))[0]
        k = gaussian_kernel(1.0, 15)
        y = convolve_periodic(x, k)
        r = apply(wiener_filter(k, 1e-4, 64, 64), y)
        assert psnr(r, x) > psnr(y, x) + 5

    def test_large_nsr_gives_zero_gains(self):
        f = wiener_filter(gaussian_kernel(1.0, 5), 1e12, 8, 8)
        assert np.abs(f.gains).max() < 1e-11

    def test_zero_bins_get_zero_gain(self):
        # [0.5, 0, 0.5] along a row has spectrum cos(2 pi v / 8), zero at columns 2 and 6
        k = np.zeros((3, 3))
        k[1, 0] = k[1, 2] = 0.5
        assert wiener_zero_bins(k, 8, 8) == 16
        f = wiener_filter(k, 0.0, 8, 8)
        assert np.all(f.gains[:, [2, 6]] == 0)
        assert np.all(np.isfinite(f.gains))

    def test_consistency_as_nsr_shrinks(self):
        x = synthetic_textures(1, 32, 32, np.random.default_rng(3))[0]
        k = gaussian_kernel(0.5, 7)
        assert np.abs(kernel_spectrum(k, 32, 32)).min() > 0
        y = convolve_periodic(x, k)
        errs = [np.abs(apply(wiener_filter(k, nsr, 32, 32), y) - x).max()
                for nsr in (1e-2, 1e-4, 1e-6)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-3

    def test_negative_nsr(self):
        with pytest.raises(ValueError):
            wiener_filter(delta_kernel(3), -1.0, 8, 8)


class TestApply:
    def test_identity(self, rng):
        img = rng.random((3, 7, 9))
        np.testing.assert_allclose(apply(SpectralFilter.identity(7, 9), img), img, atol=1e-14)

    def test_kernel_spectrum_gains_convolve(self, rng):
        k = rng.standard_normal((5, 5))
        img = rng.random((1, 12, 12))
        f = SpectralFilter(kernel_spectrum(k, 12, 12))
        np.testing.assert_allclose(apply(f, img), convolve_periodic(img, k), atol=1e-12)

    def test_matches_naive_oracle(self, rng):
        img = rng.random((2, 8, 6))
        g = np.fft.fft2(rng.standard_normal((8, 6)))  # Hermitian, so the output is real
        np.testing.assert_allclose(apply(SpectralFilter(g), img),
                                   filter_apply_oracle(g, img), atol=1e-10)

    def test_non_hermitian_gains_flagged(self, rng):
        f = SpectralFilter(random_gains(rng, 8, 8))
        with pytest.raises(NonNegligibleImaginaryPart):
            apply(f, rng.random((1, 8, 8)))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            apply(SpectralFilter.identity(8, 8), rng.random((1, 8, 9)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SpectralFilter(np.full((2, 2), np.nan))


class TestLossB:
    def test_identity_pair_is_zero(self, rng):
        x = rng.random((2, 1, 8, 8))
        loss = loss_B(delta_kernel(3), SpectralFilter.identity(8, 8), x, np.zeros_like(x),
                      rng.random((2, 1, 8, 8)), W_B)
        assert loss < 1e-25

    def test_exact_inverse(self):
        k = gaussian_kernel(0.5, 7)
        assert wiener_zero_bins(k, 16, 16) == 0
        xs = np.stack(synthetic_textures(2, 16, 16, np.random.default_rng(0)))
        ys = np.stack([convolve_periodic(x, k) for x in xs])
        f = wiener_filter(k, 0.0, 16, 16)
        assert loss_B(k, f, xs, np.zeros_like(xs), ys, W_B) < 1e-8

    def test_matches_oracle(self, batch):
        k, g, x, d, y = batch
        got = loss_B(k, SpectralFilter(g), x, d, y, W_B)
        ref = loss_b_oracle(k, g, x, d, y, 0.7, 1.3)
        assert got == pytest.approx(ref, rel=1e-10)

    def test_taps_gradient(self, batch, rng):
        k, g, x, d, y = batch
        f = SpectralFilter(g)
        gk, _ = grad_loss_B(k, f, x, d, y, W_B)
        num = [central_difference(lambda p: loss_B(p, f, x, d, y, W_B), k, i) for i in range(9)]
        assert relative_error(gk.ravel(), num) < 1e-5

    @pytest.mark.parametrize("part", ["real", "imag"])
    def test_gain_gradient(self, batch, rng, part):
        k, g, x, d, y = batch
        _, gg = grad_loss_B(k, SpectralFilter(g), x, d, y, W_B)
        unit = 1.0 if part == "real" else 1j
        f = lambda p: loss_B(k, SpectralFilter(g + unit * p), x, d, y, W_B)
        idx = rng.choice(g.size, 12, replace=False)
        num = [central_difference(f, np.zeros(g.shape), i) for i in idx]
        ana = getattr(gg, part).flat[idx]
        assert relative_error(ana, num) < 1e-5

    def test_mismatched_batches(self, batch):
        k, g, x, d, y = batch
        with pytest.raises(DimensionMismatch):
            loss_B(k, SpectralFilter(g), x, d[:1], y, W_B)


class TestLossC:
    def test_matches_oracle(self, rng):
        k = rng.standard_normal((3, 3))
        g = random_gains(rng, 8, 8)
        xs, ys = rng.random((2, 4, 1, 8, 8))
        got = loss_C(k, SpectralFilter(g), bundle_of(xs), ys, W_C)
        assert got == pytest.approx(loss_c_oracle(k, g, xs, ys, 0.4, 2.0), rel=1e-10)

    def test_penalty_only(self, rng):
        k = rng.standard_normal((5, 5))
        ys = rng.random((3, 1, 8, 8))
        w = EcallWeights(lambda_c1=0.3)
        got = loss_C(k, SpectralFilter(random_gains(rng, 8, 8)), bundle_of(ys), ys, w)
        assert got == pytest.approx(0.3 * np.sum(k ** 2), rel=1e-14)

    def test_zero_when_means_match(self, rng):
        ys = rng.random((3, 1, 8, 8))
        got = loss_C(np.zeros((3, 3)), SpectralFilter.identity(8, 8), bundle_of(ys), ys, W_C)
        assert got < 1e-25

    def test_gradients(self, rng):
        k = rng.standard_normal((3, 3))
        g = random_gains(rng, 8, 8)
        xs, ys = rng.random((2, 3, 2, 8, 8))
        bx = bundle_of(xs)
        gk, gg = grad_loss_C(k, SpectralFilter(g), bx, ys, W_C)
        num_k = [central_difference(lambda p: loss_C(p, SpectralFilter(g), bx, ys, W_C), k, i)
                 for i in range(9)]
        assert relative_error(gk.ravel(), num_k) < 1e-5
        base = np.zeros(g.shape)
        idx = rng.choice(g.size, 12, replace=False)
        for unit, part in ((1.0, "real"), (1j, "imag")):
            f = lambda p: loss_C(k, SpectralFilter(g + unit * p), bx, ys, W_C)
            num = [central_difference(f, base, i) for i in idx]
            assert relative_error(getattr(gg, part).flat[idx], num) < 1e-5

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            loss_C(np.zeros((3, 3)), SpectralFilter.identity(8, 8),
                   bundle_of(rng.random((2, 1, 8, 8))), rng.random((2, 1, 6, 6)), W_C)


def test_total_loss_is_additive(rng):
    k = rng.standard_normal((3, 3))
    f = SpectralFilter(random_gains(rng, 8, 8))
    x, d, y = rng.random((3, 2, 1, 8, 8))
    by, bx = bundle_of(y), bundle_of(x)
    mask = sample_mask((1, 8, 8), 0.2, rng)
    w = PHASE2_WEIGHTS
    parts = loss_A(k, x, d, by, mask, w) + loss_B(k, f, x, d, y, w) + loss_C(k, f, bx, y, w)
    assert total_loss(k, f, x, d, y, by, bx, mask, w) == parts


def _tiny_cfg(p1=30, p2=20, p3=40, **kw):
    return EcallConfig(
        image_size=16, kernel_size=5, n=12, n_test=4,
        phase1=PhaseConfig(p1, PHASE1_WEIGHTS, lr_kernel=1e-3),
        phase2=PhaseConfig(p2, PHASE2_WEIGHTS, lr_kernel=1e-4, lr_filter=1e-3),
        phase3=PhaseConfig(p3, PHASE3_WEIGHTS, lr_filter=1e-3), **kw)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(12, 16, 1.0, 5, 0.0, seed=8, n_test=4)


class TestTraining:
    def test_phase_weights(self):
        assert PHASE1_WEIGHTS == EcallWeights(lambda_a1=1, lambda_c1=5)
        assert PHASE2_WEIGHTS == EcallWeights(lambda_a1=10, lambda_a2=10, lambda_b1=1,
                                              lambda_b2=1, lambda_c1=5, lambda_c2=10)
        assert PHASE3_WEIGHTS == EcallWeights(lambda_b2=1, lambda_c2=10)

    def test_full_scale_schedule(self):
        cfg = full_scale()
        assert (cfg.phase1.iters, cfg.phase2.iters, cfg.phase3.iters) == (1000, 10000, 10000)
        assert (cfg.phase1.lr_kernel, cfg.phase2.lr_kernel, cfg.phase2.lr_filter,
                cfg.phase3.lr_filter) == (1e-3, 1e-4, 1e-3, 1e-3)
        assert cfg.phase2.batch_size == 2 and cfg.mask_frac == 0.2
        sup = cfg.supervised
        assert (sup.iters, sup.lr_kernel, sup.lr_filter, sup.lambda_kernel) == (20000, 1e-4, 1e-3, 5.0)

    def test_phase3_freezes_kernel(self, tiny):
        cfg = _tiny_cfg()
        t = EcallTrainer(tiny, cfg, np.random.default_rng(0))
        t.run_phase(cfg.phase1, True, False)
        t.run_phase(cfg.phase2, True, True)
        before = t.kernel.copy()
        gains = t.gains.copy()
        t.run_phase(cfg.phase3, False, True)
        assert t.kernel.tobytes() == before.tobytes()
        assert not np.array_equal(t.gains, gains)

    def test_report_and_determinism(self, tiny):
        cfg = _tiny_cfg()
        k1, f1, r1 = train_three_phase(tiny, cfg, np.random.default_rng(1))
        k2, f2, r2 = train_three_phase(tiny, cfg, np.random.default_rng(1))
        assert k1.tobytes() == k2.tobytes() and f1.gains.tobytes() == f2.gains.tobytes()
        assert [len(r1.curves[p]) for p in ("phase1", "phase2", "phase3")] == [30, 20, 40]
        assert set(r1.kernel_metrics) == {"l2err", "mnc"}
        assert r1.image_metrics["count"] == 4
        assert r1.curves == r2.curves

    def test_learned_filter_stays_hermitian(self, tiny):
        _, f, _ = train_three_phase(tiny, _tiny_cfg(), np.random.default_rng(2))
        g = f.gains
        mirrored = np.conj(np.roll(g[::-1, ::-1], 1, axis=(0, 1)))
        assert np.abs(g - mirrored).max() < 1e-6

    def test_zero_iterations(self, tiny):
        k, f, _ = train_three_phase(tiny, _tiny_cfg(0, 0, 0), np.random.default_rng(0))
        np.testing.assert_array_equal(k, delta_kernel(5))
        np.testing.assert_array_equal(f.gains, 1)

    def test_phase3_trend(self):
        ds = generate_dataset(40, 32, 1.0, 7, 0.0, seed=5, n_test=0)
        cfg = EcallConfig(image_size=32, kernel_size=7, n=40, n_test=0,
                          phase3=PhaseConfig(1000, PHASE3_WEIGHTS, lr_filter=1e-3))
        t = EcallTrainer(ds, cfg, np.random.default_rng(0), kernel=ds.kernel)
        curve = []
        t.run_phase(cfg.phase3, False, True, curve)
        totals = np.array([c["total"] for c in curve])
        smooth = totals.reshape(-1, 50).mean(axis=1)
        assert np.all(np.diff(smooth) <= 0)

    def test_full_expectation_option(self, tiny):
        cfg = _tiny_cfg(0, 5, 5, lc_expectation="full")
        k, f, _ = train_three_phase(tiny, cfg, np.random.default_rng(0))
        assert np.all(np.isfinite(f.gains))


class TestSupervised:
    def test_zero_iterations(self, tiny):
        cfg = dataclasses.replace(_tiny_cfg(), supervised=SupervisedConfig(iters=0))
        pairs = list(zip(tiny.test_originals, tiny.test_observations))
        k, f, r = supervised_baseline(pairs, tiny.kernel, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(k, delta_kernel(5))
        np.testing.assert_array_equal(f.gains, 1)
        assert r.curves["supervised"] == []

    def test_lambda_is_five_by_default(self):
        assert SupervisedConfig().lambda_kernel == 5.0

    def test_improves_kernel(self, tiny):
        cfg = dataclasses.replace(_tiny_cfg(), supervised=SupervisedConfig(iters=300, lr_kernel=1e-2))
        pairs = list(zip(tiny.originals, convolve_periodic_all(tiny.originals, tiny.kernel)))
        k, _, r = supervised_baseline(pairs, tiny.kernel, cfg, np.random.default_rng(0))
        assert len(r.curves["supervised"]) == 300
        assert r.curves["supervised"][-1]["loss_kernel"] < r.curves["supervised"][0]["loss_kernel"]
        assert r.kernel_metrics["mnc"] > mnc(delta_kernel(5), tiny.kernel)


def convolve_periodic_all(xs, k):
    return [convolve_periodic(x, k) for x in xs]
