"""Kernel estimation by expectation calibration.

Two estimators are provided. :func:`closed_form_estimate` divides the mean
spectrum of the observations by the mean spectrum of the originals.
:func:`phase1_estimate` minimizes the masked expectation-calibration loss
:func:`loss_A` plus a squared-norm penalty on the taps with AdamW.

Model-side sums over a batch are written as spectra: for originals ``x_i`` and
noises ``d_i`` the model observation spectrum is ``K * X_i + D_i`` with ``K``
the kernel spectrum, so the batch sum is ``K * sum(X_i) + sum(D_i)``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft

from ecall.config import EcallWeights
from ecall.errors import DegenerateDenominator, DimensionMismatch
from ecall.optim import OptimizerState, optimizer_step
from ecall.stats import bundle_of
from ecall.tensor import as_image, as_kernel, extract_kernel, fft2, ifft2, kernel_spectrum


@dataclass(frozen=True)
class FrequencyMask:
    keep: np.ndarray
    keep_fraction: float

    @classmethod
    def all_pass(cls, dims):
        return cls(np.ones(dims, dtype=bool), 1.0)


def sample_mask(dims, zero_fraction, rng):
    """Bernoulli mask zeroing each frequency bin with probability ``zero_fraction``."""
    if not 0 <= zero_fraction < 1:
        raise ValueError(f"zero_fraction must lie in [0, 1), got {zero_fraction}")
    if zero_fraction == 0:
        return FrequencyMask.all_pass(dims)
    return FrequencyMask(rng.random(dims) >= zero_fraction, 1.0 - zero_fraction)


def delta_kernel(size):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def taps_gradient(cotangent, size):
    """Map a frequency-domain cotangent to a gradient on the kernel taps.

    If ``dL = Re sum(C * dK)`` where ``K`` is the spectrum of the embedded
    kernel, then ``dL/dw_j = Re fft2(C)`` at the wrapped position of tap j.
    Leading axes of ``C`` (batch, channel) are summed first.
    """
    c = cotangent.reshape(-1, *cotangent.shape[-2:]).sum(axis=0)
    return extract_kernel(scipy.fft.fft2(c).real, size)


def _unit(z):
    mag = np.abs(z)
    return np.divide(z, mag, out=np.zeros_like(z), where=mag > 0)


def loss_a_spectral(kspec, x_spec, noise_spec, y_sum, y_abs_sum, keep, weights, grad=False):
    """Masked expectation-calibration loss from precomputed spectra.

    Parameters
    ----------
    kspec : (H, W) complex
        Kernel spectrum.
    x_spec, noise_spec : (N, c, H, W) complex
        Spectra of the originals and of the (already permuted) noises.
    y_sum, y_abs_sum : (c, H, W)
        ``N * E[y^]`` and ``N * E[|y^|]`` from the observation statistics.
    keep : (c, H, W) bool or None
        Frequency mask; None keeps every bin.

    Returns the loss and, with ``grad`` set, the cotangent ``C`` on ``kspec``.
    """
    n = len(x_spec)
    chi = 1.0 if keep is None else keep.astype(np.float64)
    loss = 0.0
    cot = np.zeros(x_spec.shape[1:], dtype=np.complex128)
    if weights.lambda_a1 or grad:
        x_sum = x_spec.sum(axis=0)
        resid = chi * (y_sum - (kspec * x_sum + noise_spec.sum(axis=0)))
        loss += weights.lambda_a1 / n * np.abs(resid).sum()
        if grad and weights.lambda_a1:
            cot -= weights.lambda_a1 / n * chi * np.conj(_unit(resid)) * x_sum
    if weights.lambda_a2:
        model = kspec * x_spec
        model += noise_spec
        mag = np.abs(model)
        resid2 = chi * (y_abs_sum - mag.sum(axis=0))
        loss += weights.lambda_a2 / n * np.abs(resid2).sum()
        if grad:
            # sum_i conj(Z_i) X_i / |Z_i|, with 0 where Z_i vanishes
            np.conjugate(model, out=model)
            model *= x_spec
            np.divide(model, mag, out=model, where=mag > 0)
            model[mag == 0] = 0
            cot -= weights.lambda_a2 / n * chi * np.sign(resid2) * model.sum(axis=0)
    return (loss, cot) if grad else loss


def _prepare(k, x_batch, noise_batch, y_bundle, mask):
    k = as_kernel(k)
    x = as_image(x_batch)
    d = as_image(noise_batch)
    if x.ndim != 4 or x.shape != d.shape:
        raise DimensionMismatch(f"x batch {x.shape} vs noise batch {d.shape}")
    if y_bundle.shape != x.shape[1:]:
        raise DimensionMismatch(f"bundle {y_bundle.shape} vs images {x.shape[1:]}")
    keep = np.ones(x.shape[1:], dtype=bool) if mask is None else np.broadcast_to(mask.keep, x.shape[1:])
    n = len(x)
    h, w = x.shape[-2:]
    return (k, kernel_spectrum(k, h, w), fft2(x), fft2(d),
            n * y_bundle.mean_spectrum, n * y_bundle.mean_abs_spectrum, keep)


def loss_A(k, x_batch, noise_batch, y_bundle, mask, weights):
    """Masked expectation-calibration loss of kernel ``k``.

    ``noise_batch[i]`` is paired with ``x_batch[i]``; callers shuffle the
    noise collection beforehand. ``mask=None`` means no masking.
    """
    _, kspec, xs, ds, ys, yas, keep = _prepare(k, x_batch, noise_batch, y_bundle, mask)
    return loss_a_spectral(kspec, xs, ds, ys, yas, keep, weights)


def grad_loss_A(k, x_batch, noise_batch, y_bundle, mask, weights):
    """Gradient of :func:`loss_A` with respect to the kernel taps.

    Bins with zero residual contribute the subgradient 0.
    """
    k, kspec, xs, ds, ys, yas, keep = _prepare(k, x_batch, noise_batch, y_bundle, mask)
    _, cot = loss_a_spectral(kspec, xs, ds, ys, yas, keep, weights, grad=True)
    return taps_gradient(cot, k.shape[0])


def closed_form_estimate(y_bundle, x_bundle, eps=None, size=15):
    """Kernel from the ratio of mean spectra, regularized Wiener-style.

    ``k^ = E[y^] conj(E[x^]) / (|E[x^]|^2 + eps)``, averaged over channels,
    inverted and cropped to ``size x size`` around the center. ``eps`` defaults
    to ``1e-8 * max |E[x^]|^2``.
    """
    if y_bundle.shape != x_bundle.shape:
        raise DimensionMismatch(f"bundle {y_bundle.shape} vs bundle {x_bundle.shape}")
    ex = x_bundle.mean_spectrum
    power = np.abs(ex) ** 2
    if eps is None:
        eps = 1e-8 * power.max()
    if eps <= 0:
        raise ValueError("eps must be positive")
    weak = np.mean(power < eps)
    if weak > 0.5:
        raise DegenerateDenominator(
            f"|E[x^]|^2 below eps={eps:.3g} on {weak:.0%} of bins; "
            "the mean original spectrum carries no kernel information"
        )
    ratio = (y_bundle.mean_spectrum * np.conj(ex) / (power + eps)).mean(axis=0)
    # the ratio need not be Hermitian for finite samples; keep the real part
    return extract_kernel(ifft2(ratio, check=False), size)


def mean_spectrum_diagnostics(x_bundle):
    """Per-bin |E[x^]| summary used to judge whether the kernel is identifiable."""
    mag = np.abs(x_bundle.mean_spectrum)
    return {
        "min": float(mag.min()),
        "median": float(np.median(mag)),
        "max": float(mag.max()),
        "fraction_below_1e-3_of_max": float(np.mean(mag < 1e-3 * mag.max())),
    }


class KernelProblem:
    """Precomputed spectra for repeated evaluation of the kernel loss."""

    def __init__(self, originals, noises, observations=None, y_bundle=None):
        self.x = as_image(originals)
        self.x_spec = fft2(self.x)
        self.noise_spec = fft2(as_image(noises))
        if y_bundle is None:
            y_bundle = bundle_of(observations)
        if y_bundle.shape != self.x.shape[1:]:
            raise DimensionMismatch(f"bundle {y_bundle.shape} vs images {self.x.shape[1:]}")
        self.y_bundle = y_bundle

    @property
    def shape(self):
        return self.x.shape[1:]

    def loss_and_grad(self, k, keep, weights, rng, batch=None):
        """Loss and tap gradient on a batch of originals with freshly paired noises."""
        h, w = self.shape[-2:]
        loss, cot = self.spectral_terms(kernel_spectrum(k, h, w), keep, weights, rng, batch)
        return loss, taps_gradient(cot, k.shape[0])

    def spectral_terms(self, kspec, keep, weights, rng, batch=None):
        """Loss and cotangent on ``kspec``; noises are re-paired by a fresh
        permutation on every call."""
        n = len(self.x)
        perm = rng.permutation(n)
        if batch is None or batch >= n:
            xs = self.x_spec
        else:
            xs = self.x_spec[rng.choice(n, batch, replace=False)]
            perm = perm[:batch]
        ds = self.noise_spec[perm]
        m = len(xs)
        return loss_a_spectral(kspec, xs, ds, m * self.y_bundle.mean_spectrum,
                               m * self.y_bundle.mean_abs_spectrum, keep, weights, grad=True)


def phase1_estimate(dataset, cfg, rng, init=None, history=None):
    """Kernel-only training on the masked calibration loss plus ``lambda_c1 |w|^2``.

    ``history``, if given, is a list that receives one dict per step.
    """
    ph = cfg.phase1
    problem = KernelProblem(dataset.originals, dataset.noises, dataset.observations)
    k = delta_kernel(cfg.kernel_size) if init is None else as_kernel(init).copy()
    return run_kernel_steps(problem, k, ph.iters, ph.weights, ph.lr_kernel, cfg, rng, history)


def run_kernel_steps(problem, k, iters, weights, lr, cfg, rng, history=None):
    state = OptimizerState.create(k, **cfg.adam(lr))
    for _ in range(iters):
        keep = sample_mask(problem.shape, cfg.mask_frac, rng).keep
        loss_a, grad = problem.loss_and_grad(k, keep, weights, rng, cfg.kernel_batch)
        reg = weights.lambda_c1 * np.sum(k ** 2)
        grad = grad + 2 * weights.lambda_c1 * k
        k, state = optimizer_step(state, k, grad)
        if history is not None:
            history.append({"loss_a": loss_a, "loss_c_kernel": reg, "total": loss_a + reg})
    return k
