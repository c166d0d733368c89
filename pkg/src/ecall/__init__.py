"""Unsupervised blind deconvolution by Fourier-domain expectation calibration."""

from ecall.tensor import (
    as_image,
    as_kernel,
    convolve_periodic,
    embed_kernel,
    extract_kernel,
    fft2,
    ifft2,
    kernel_spectrum,
)

__version__ = "0.1.0"

__all__ = [
    "as_image",
    "as_kernel",
    "convolve_periodic",
    "embed_kernel",
    "extract_kernel",
    "fft2",
    "ifft2",
    "kernel_spectrum",
]
