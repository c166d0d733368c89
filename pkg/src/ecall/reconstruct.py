"""Reconstruction operators and joint training of kernel and filter.

The reconstruction operator is a learned linear shift-invariant filter: one
complex gain per frequency bin, shared across channels. ``apply`` multiplies
the spectrum by the gains and keeps the real part of the inverse transform.

Gradients with respect to the gains are returned packed as complex arrays
``dL/d(re) + 1j * dL/d(im)``, which is also how AdamW sees them (through a
float64 view).
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from ecall.errors import DimensionMismatch
from ecall.kernel import (
    KernelProblem,
    delta_kernel,
    loss_A,
    loss_a_spectral,
    sample_mask,
    taps_gradient,
)
from ecall.metrics import kernel_score, psnr, ssim
from ecall.optim import OptimizerState, optimizer_step
from ecall.stats import bundle_of
from ecall.tensor import as_image, as_kernel, fft2, ifft2, kernel_spectrum


@dataclass(frozen=True)
class SpectralFilter:
    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.complex128)
        if g.ndim != 2:
            raise DimensionMismatch(f"gains must be an (H, W) grid, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("filter gains must be finite")
        object.__setattr__(self, "gains", g)

    @property
    def height(self):
        return self.gains.shape[0]

    @property
    def width(self):
        return self.gains.shape[1]

    @classmethod
    def identity(cls, height, width):
        return cls(np.ones((height, width), dtype=np.complex128))


def wiener_filter(k, nsr, height, width):
    """Gains ``conj(K) / (|K|^2 + nsr)`` for kernel ``k``.

    With ``nsr == 0``, bins where ``K`` vanishes exactly get gain 0 (count them
    with :func:`wiener_zero_bins`).
    """
    if nsr < 0:
        raise ValueError(f"nsr must be >= 0, got {nsr}")
    kspec = kernel_spectrum(k, height, width)
    den = np.abs(kspec) ** 2 + nsr
    gains = np.zeros_like(kspec)
    ok = den > 0
    gains[ok] = np.conj(kspec[ok]) / den[ok]
    return SpectralFilter(gains)


def wiener_zero_bins(k, height, width):
    """Number of bins where the kernel spectrum is exactly zero."""
    return int(np.count_nonzero(kernel_spectrum(k, height, width) == 0))


def apply(f, img):
    """Filter every channel of ``img``; raises if the output is not real."""
    img = as_image(img)
    if img.shape[-2:] != f.gains.shape:
        raise DimensionMismatch(f"filter {f.gains.shape} vs image {img.shape}")
    return ifft2(f.gains * fft2(img))


def _real_out(gains, spec):
    return scipy.fft.ifft2(gains * spec).real


def _check_batches(*batches):
    shapes = {b.shape[1:] for b in batches}
    if len(shapes) != 1:
        raise DimensionMismatch(f"batches disagree in image shape: {shapes}")
    for b in batches[1:]:
        if b is not None and len(b) != len(batches[0]):
            raise DimensionMismatch("batches disagree in length")


def loss_b_spectral(kspec, gains, x_spec, noise_spec, y_spec, y_img, x_img, weights, grad=False):
    """Cycle-consistency loss on precomputed spectra of equal-length batches.

    Returns the loss, and with ``grad`` the cotangent on ``kspec`` together
    with the packed gain gradient.
    """
    n = len(y_spec)
    hw = gains.size
    loss = 0.0
    cot = np.zeros(y_spec.shape[1:], dtype=np.complex128)
    g_grad = np.zeros_like(gains)
    if weights.lambda_b1:
        u = _real_out(gains, y_spec)
        u_spec = scipy.fft.fft2(u)
        err = scipy.fft.ifft2(kspec * u_spec).real - y_img
        loss += weights.lambda_b1 / n * np.sum(err ** 2)
        if grad:
            e_spec = scipy.fft.fft2(err)
            scale = weights.lambda_b1 / n * 2 / hw
            cot += scale * (u_spec * np.conj(e_spec)).sum(axis=0)
            g_grad += scale * (np.conj(y_spec) * np.conj(kspec) * e_spec).sum(axis=(0, 1))
    if weights.lambda_b2:
        z_spec = kspec * x_spec + noise_spec
        err = _real_out(gains, z_spec) - x_img
        loss += weights.lambda_b2 / n * np.sum(err ** 2)
        if grad:
            e_spec = scipy.fft.fft2(err)
            scale = weights.lambda_b2 / n * 2 / hw
            cot += scale * (gains * x_spec * np.conj(e_spec)).sum(axis=0)
            g_grad += scale * (np.conj(z_spec) * e_spec).sum(axis=(0, 1))
    return (loss, cot, g_grad) if grad else loss


def loss_c_spectral(k, gains, x_mean, y_spec, weights, grad=False):
    """Kernel-norm penalty plus mean-matching of reconstructions.

    ``x_mean`` is the target E[x]; the reconstruction mean is taken over the
    rows of ``y_spec``. Returns the loss, and with ``grad`` the tap gradient
    and packed gain gradient.
    """
    n = len(y_spec)
    loss = weights.lambda_c1 * np.sum(k ** 2)
    k_grad = 2 * weights.lambda_c1 * k
    g_grad = np.zeros_like(gains)
    if weights.lambda_c2:
        diff = _real_out(gains, y_spec).sum(axis=0) - n * x_mean
        loss += weights.lambda_c2 / n * np.sum(diff ** 2)
        if grad:
            d_spec = scipy.fft.fft2(diff)
            scale = weights.lambda_c2 / n * 2 / gains.size
            g_grad += scale * (np.conj(y_spec.sum(axis=0)) * d_spec).sum(axis=0)
    return (loss, k_grad, g_grad) if grad else loss


def _b_inputs(k, f, x_batch, noise_batch, y_batch):
    k = as_kernel(k)
    x, d, y = as_image(x_batch), as_image(noise_batch), as_image(y_batch)
    if x.ndim != 4:
        raise DimensionMismatch("batches must be stacks of (c, H, W) images")
    _check_batches(x, d, y)
    if x.shape[-2:] != f.gains.shape:
        raise DimensionMismatch(f"filter {f.gains.shape} vs images {x.shape[-2:]}")
    h, w = x.shape[-2:]
    return k, kernel_spectrum(k, h, w), fft2(x), fft2(d), fft2(y), y, x


def loss_B(k, f, x_batch, noise_batch, y_batch, weights):
    """``lambda_b1/N sum |y - k*(R y)|^2 + lambda_b2/N sum |x - R(k*x + d)|^2``."""
    _, kspec, xs, ds, ys, y, x = _b_inputs(k, f, x_batch, noise_batch, y_batch)
    return loss_b_spectral(kspec, f.gains, xs, ds, ys, y, x, weights)


def grad_loss_B(k, f, x_batch, noise_batch, y_batch, weights):
    """Gradients of :func:`loss_B`: ``(taps, packed gains)``."""
    k, kspec, xs, ds, ys, y, x = _b_inputs(k, f, x_batch, noise_batch, y_batch)
    _, cot, g = loss_b_spectral(kspec, f.gains, xs, ds, ys, y, x, weights, grad=True)
    return taps_gradient(cot, k.shape[0]), g


def _c_inputs(k, f, x_bundle, y_batch):
    k = as_kernel(k)
    y = as_image(y_batch)
    if y.ndim != 4 or y.shape[1:] != x_bundle.shape:
        raise DimensionMismatch(f"y batch {y.shape} vs bundle {x_bundle.shape}")
    if y.shape[-2:] != f.gains.shape:
        raise DimensionMismatch(f"filter {f.gains.shape} vs images {y.shape[-2:]}")
    return k, fft2(y)


def loss_C(k, f, x_bundle, y_batch, weights):
    """``lambda_c1 |w|^2 + lambda_c2/N |sum x_i - sum R y_i|^2`` with
    ``sum x_i`` taken as ``N * E[x]`` from ``x_bundle``."""
    k, ys = _c_inputs(k, f, x_bundle, y_batch)
    return loss_c_spectral(k, f.gains, x_bundle.mean_image, ys, weights)


def grad_loss_C(k, f, x_bundle, y_batch, weights):
    k, ys = _c_inputs(k, f, x_bundle, y_batch)
    _, kg, g = loss_c_spectral(k, f.gains, x_bundle.mean_image, ys, weights, grad=True)
    return kg, g


def total_loss(k, f, x_batch, noise_batch, y_batch, y_bundle, x_bundle, mask, weights):
    """Sum of the three loss families on one batch."""
    return (loss_A(k, x_batch, noise_batch, y_bundle, mask, weights)
            + loss_B(k, f, x_batch, noise_batch, y_batch, weights)
            + loss_C(k, f, x_bundle, y_batch, weights))


class _EpochSampler:
    """Draws mini-batches without replacement, reshuffling at each epoch."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, size):
        size = min(size, self.n)
        if self.pos + size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + size]
        self.pos += size
        return idx


@dataclass
class TrainReport:
    curves: dict = field(default_factory=dict)
    kernel_metrics: dict = field(default_factory=dict)
    image_metrics: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "curves": self.curves,
            "kernel_metrics": self.kernel_metrics,
            "image_metrics": self.image_metrics,
            "wall_clock": self.wall_clock,
            "config": self.config,
        }


class EcallTrainer:
    """Joint kernel/filter optimization over an unpaired dataset.

    The calibration loss always uses the full collection statistics (or
    ``cfg.kernel_batch`` originals); the cycle and mean-matching terms use
    mini-batches of ``phase.batch_size`` drawn per epoch.
    """

    def __init__(self, dataset, cfg, rng, kernel=None, filt=None):
        self.cfg = cfg
        self.rng = rng
        self.problem = KernelProblem(dataset.originals, dataset.noises, dataset.observations)
        self.x = self.problem.x
        self.y = as_image(dataset.observations)
        self.y_spec = fft2(self.y)
        self.x_mean = bundle_of(self.x).mean_image
        h, w = self.x.shape[-2:]
        self.kernel = delta_kernel(cfg.kernel_size) if kernel is None else as_kernel(kernel).copy()
        self.gains = (SpectralFilter.identity(h, w) if filt is None else filt).gains.copy()
        self._x_sampler = _EpochSampler(len(self.x), rng)
        self._y_sampler = _EpochSampler(len(self.y), rng)

    @property
    def filter(self):
        return SpectralFilter(self.gains.copy())

    def _step_terms(self, weights, batch_size, need_kernel, need_filter):
        h, w = self.x.shape[-2:]
        kspec = kernel_spectrum(self.kernel, h, w)
        terms = {}
        k_grad = np.zeros_like(self.kernel)
        g_grad = np.zeros_like(self.gains)
        cot = np.zeros(self.x.shape[1:], dtype=np.complex128)

        if weights.lambda_a1 or weights.lambda_a2:
            keep = sample_mask(self.problem.shape, self.cfg.mask_frac, self.rng).keep
            terms["loss_a"], cot_a = self.problem.spectral_terms(
                kspec, keep, weights, self.rng, self.cfg.kernel_batch)
            cot += cot_a

        if weights.lambda_b1 or weights.lambda_b2 or weights.lambda_c2:
            xi = self._x_sampler.take(batch_size)
            yi = self._y_sampler.take(batch_size)
            ni = self.rng.choice(len(self.x), len(xi), replace=False)
            terms["loss_b"], cot_b, gb = loss_b_spectral(
                kspec, self.gains, self.problem.x_spec[xi], self.problem.noise_spec[ni],
                self.y_spec[yi], self.y[yi], self.x[xi], weights, grad=True)
            cot += cot_b
            g_grad += gb
            y_spec_c = self.y_spec if self.cfg.lc_expectation == "full" else self.y_spec[yi]
        else:
            y_spec_c = self.y_spec[:0]

        terms["loss_c"], kc, gc = loss_c_spectral(
            self.kernel, self.gains, self.x_mean, y_spec_c, weights, grad=True)
        g_grad += gc
        if need_kernel:
            k_grad = taps_gradient(cot, self.kernel.shape[0]) + kc
        terms["total"] = sum(terms.values())
        return terms, k_grad, g_grad

    def run_phase(self, phase, train_kernel, train_filter, curve=None):
        k_opt = OptimizerState.create(self.kernel, **self.cfg.adam(phase.lr_kernel))
        g_opt = OptimizerState.create(self.gains.view(np.float64), **self.cfg.adam(phase.lr_filter))
        for _ in range(phase.iters):
            terms, k_grad, g_grad = self._step_terms(phase.weights, phase.batch_size,
                                                     train_kernel, train_filter)
            if train_kernel:
                self.kernel, k_opt = optimizer_step(k_opt, self.kernel, k_grad)
            if train_filter:
                new, g_opt = optimizer_step(g_opt, self.gains.view(np.float64),
                                            g_grad.view(np.float64))
                self.gains = new.view(np.complex128)
            if curve is not None:
                curve.append({k: float(v) for k, v in terms.items()})


def evaluate_reconstruction(f, test_originals, test_observations, peak=1.0):
    """Mean PSNR/SSIM of reconstructions and of the raw observations."""
    rec_psnr, rec_ssim, obs_psnr, obs_ssim = [], [], [], []
    for x, y in zip(test_originals, test_observations):
        r = apply(f, y)
        rec_psnr.append(psnr(r, x, peak))
        rec_ssim.append(ssim(r, x, peak))
        obs_psnr.append(psnr(y, x, peak))
        obs_ssim.append(ssim(y, x, peak))
    return {
        "psnr_reconstruction": float(np.mean(rec_psnr)),
        "ssim_reconstruction": float(np.mean(rec_ssim)),
        "psnr_observation": float(np.mean(obs_psnr)),
        "ssim_observation": float(np.mean(obs_ssim)),
        "count": len(rec_psnr),
        "peak": peak,
        "ssim_window": "gaussian 11x11 sigma=1.5, K1=0.01, K2=0.03",
    }


def train_three_phase(dataset, cfg, rng, phases=(1, 2, 3)):
    """Phase 1 kernel only; Phase 2 kernel and filter; Phase 3 filter only.

    Returns ``(kernel, filter, report)``.
    """
    trainer = EcallTrainer(dataset, cfg, rng)
    report = TrainReport(config=cfg.to_dict())
    plan = {1: (cfg.phase1, True, False), 2: (cfg.phase2, True, True),
            3: (cfg.phase3, False, True)}
    for p in phases:
        phase, tk, tf = plan[p]
        curve = report.curves.setdefault(f"phase{p}", [])
        start = time.perf_counter()
        trainer.run_phase(phase, tk, tf, curve)
        report.wall_clock[f"phase{p}"] = time.perf_counter() - start
    k, f = trainer.kernel, trainer.filter
    _score(report, k, f, dataset)
    return k, f, report


def _score(report, k, f, dataset):
    if dataset.kernel is not None:
        s = kernel_score(k, dataset.kernel)
        report.kernel_metrics = {"l2err": s.l2err, "mnc": s.mnc}
    if len(dataset.test_originals):
        report.image_metrics = evaluate_reconstruction(
            f, dataset.test_originals, dataset.test_observations)


def supervised_baseline(paired_set, k_true, cfg, rng):
    """Train kernel and filter on paired ``(x_i, y_i)`` data.

    Minimizes ``1/N sum |k*x_i - y_i|^2 + 1/N sum |x_i - R y_i|^2 +
    lambda |k|^2`` with AdamW on mini-batches.
    """
    sc = cfg.supervised
    x = as_image(np.stack([p[0] for p in paired_set]))
    y = as_image(np.stack([p[1] for p in paired_set]))
    _check_batches(x, y)
    h, w = x.shape[-2:]
    x_spec, y_spec = fft2(x), fft2(y)
    k = delta_kernel(cfg.kernel_size)
    gains = SpectralFilter.identity(h, w).gains.copy()
    k_opt = OptimizerState.create(k, **cfg.adam(sc.lr_kernel))
    g_opt = OptimizerState.create(gains.view(np.float64), **cfg.adam(sc.lr_filter))
    sampler = _EpochSampler(len(x), rng)
    curve = []
    start = time.perf_counter()
    for _ in range(sc.iters):
        idx = sampler.take(sc.batch_size)
        n = len(idx)
        kspec = kernel_spectrum(k, h, w)
        err_k = scipy.fft.ifft2(kspec * x_spec[idx]).real - y[idx]
        err_r = _real_out(gains, y_spec[idx]) - x[idx]
        loss_k = np.sum(err_k ** 2) / n
        loss_r = np.sum(err_r ** 2) / n
        reg = sc.lambda_kernel * np.sum(k ** 2)
        cot = 2 / (n * h * w) * (x_spec[idx] * np.conj(scipy.fft.fft2(err_k)))
        k_grad = taps_gradient(cot, k.shape[0]) + 2 * sc.lambda_kernel * k
        g_grad = (2 / (n * h * w) * np.conj(y_spec[idx]) * scipy.fft.fft2(err_r)).sum(axis=(0, 1))
        k, k_opt = optimizer_step(k_opt, k, k_grad)
        new, g_opt = optimizer_step(g_opt, gains.view(np.float64), g_grad.view(np.float64))
        gains = new.view(np.complex128)
        curve.append({"loss_kernel": float(loss_k), "loss_recon": float(loss_r),
                      "loss_reg": float(reg), "total": float(loss_k + loss_r + reg)})
    f = SpectralFilter(gains)
    report = TrainReport(curves={"supervised": curve}, config=cfg.to_dict(),
                         wall_clock={"supervised": time.perf_counter() - start})
    if k_true is not None:
        s = kernel_score(k, k_true)
        report.kernel_metrics = {"l2err": s.l2err, "mnc": s.mnc}
    return k, f, report
