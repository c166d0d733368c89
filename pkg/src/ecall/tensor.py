"""Images, spectra and kernels on a periodic grid.

Images are float64 arrays of shape ``(c, H, W)``; spectra are complex128 arrays
of the same shape. Every function also accepts a stacked batch ``(N, c, H, W)``
because all transforms act on the last two axes only.

The DFT is unnormalized in the forward direction and carries ``1/(H*W)`` on the
inverse, so a unit-sum kernel has a spectrum equal to 1 at DC.
"""

import numpy as np
import scipy.fft

from ecall.errors import (
    DataError,
    EvenSize,
    KernelLargerThanImage,
    NonNegligibleImaginaryPart,
)

# imaginary residue of an inverse transform is tolerated up to
# max(IMAG_ABS_TOL, IMAG_REL_TOL * max|real|)
IMAG_ABS_TOL = 1e-8
IMAG_REL_TOL = 1e-6


def as_image(data, copy=False):
    """Validate ``data`` as an image (or batch of images) and return float64.

    A 2-D array is promoted to a single-channel image.
    """
    arr = np.array(data, dtype=np.float64, copy=copy or None)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim not in (3, 4) or min(arr.shape) < 1:
        raise DataError(f"expected a (c, H, W) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite values")
    return arr


def as_kernel(weights):
    """Validate a square, odd-sized, finite 2-D kernel and return float64."""
    k = np.asarray(weights, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DataError(f"kernel must be square 2-D, got shape {k.shape}")
    if k.shape[0] % 2 == 0:
        raise EvenSize(f"kernel size must be odd, got {k.shape[0]}")
    if not np.all(np.isfinite(k)):
        raise DataError("kernel contains non-finite values")
    return k


def fft2(img):
    """Per-channel forward 2-D DFT over the last two axes."""
    return scipy.fft.fft2(np.asarray(img, dtype=np.float64))


def ifft2(spec, check=True):
    """Inverse 2-D DFT, returning the real part.

    With ``check`` set, a residual imaginary part larger than the tolerance
    raises :class:`NonNegligibleImaginaryPart`; it signals a spectrum that did
    not come from a real image.
    """
    out = scipy.fft.ifft2(np.asarray(spec, dtype=np.complex128))
    if check and out.size:
        imag = np.max(np.abs(out.imag))
        tol = max(IMAG_ABS_TOL, IMAG_REL_TOL * np.max(np.abs(out.real)))
        if imag > tol:
            raise NonNegligibleImaginaryPart(
                f"imaginary residue {imag:.3e} exceeds tolerance {tol:.3e}"
            )
    return np.ascontiguousarray(out.real)


def tap_offsets(size):
    """Row/column offsets of the taps of a ``size x size`` kernel, center = 0."""
    r = size // 2
    return np.arange(-r, r + 1)


def embed_kernel(k, height, width):
    """Place ``k`` on an ``height x width`` zero grid with its center at (0, 0).

    Taps left of / above the center wrap to the far edge, so that pointwise
    multiplication of spectra is centered circular convolution.
    """
    k = as_kernel(k)
    s = k.shape[0]
    if s > min(height, width):
        raise KernelLargerThanImage(
            f"kernel of size {s} does not fit a {height}x{width} grid"
        )
    grid = np.zeros((height, width))
    off = tap_offsets(s)
    # np.add.at keeps overlapping wrapped taps correct when s == H or s == W
    rows, cols = np.meshgrid(off % height, off % width, indexing="ij")
    np.add.at(grid, (rows, cols), k)
    return grid


def extract_kernel(grid, size):
    """Inverse of :func:`embed_kernel`: read a centered ``size x size`` crop.

    Works on real or complex grids and on stacked leading axes.
    """
    off = tap_offsets(size)
    h, w = grid.shape[-2:]
    return grid[..., (off % h)[:, None], (off % w)[None, :]]


def kernel_spectrum(k, height, width):
    """DFT of the centered, wrapped embedding of ``k``; shape ``(H, W)``.

    The result broadcasts against ``(c, H, W)`` spectra.
    """
    return scipy.fft.fft2(embed_kernel(k, height, width))


def convolve_periodic(img, k):
    """Centered circular convolution of every channel of ``img`` with ``k``."""
    img = as_image(img)
    h, w = img.shape[-2:]
    return ifft2(kernel_spectrum(k, h, w) * fft2(img), check=False)
