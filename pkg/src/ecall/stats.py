"""Empirical expectations over image collections.

An :class:`ExpectationBundle` holds the mean spectrum E[F(x)], the mean
modulus E[|F(x)|] and the mean image E[x] of a collection. The loss functions
compare these between the model side and the data side.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ecall.errors import DataError, DimensionMismatch, EmptyCollection
from ecall.io import read_tensor, write_tensor
from ecall.tensor import as_image, fft2


@dataclass(frozen=True)
class ExpectationBundle:
    mean_spectrum: np.ndarray
    mean_abs_spectrum: np.ndarray
    mean_image: np.ndarray
    count: int

    @property
    def shape(self):
        return self.mean_image.shape

    @classmethod
    def empty(cls):
        return cls(None, None, None, 0)

    def accumulate(self, img):
        """Return a new bundle with ``img`` folded into the running means."""
        img = as_image(img)
        if img.ndim != 3:
            raise DimensionMismatch("accumulate takes one (c, H, W) image")
        spec = fft2(img)
        if self.count == 0:
            return ExpectationBundle(spec, np.abs(spec), img.copy(), 1)
        if img.shape != self.shape:
            raise DimensionMismatch(f"image {img.shape} vs bundle {self.shape}")
        n = self.count + 1
        return ExpectationBundle(
            self.mean_spectrum + (spec - self.mean_spectrum) / n,
            self.mean_abs_spectrum + (np.abs(spec) - self.mean_abs_spectrum) / n,
            self.mean_image + (img - self.mean_image) / n,
            n,
        )

    def merge(self, other):
        """Count-weighted combination of two partial bundles."""
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        if other.shape != self.shape:
            raise DimensionMismatch(f"bundle {other.shape} vs bundle {self.shape}")
        n = self.count + other.count
        a, b = self.count / n, other.count / n
        return ExpectationBundle(
            a * self.mean_spectrum + b * other.mean_spectrum,
            a * self.mean_abs_spectrum + b * other.mean_abs_spectrum,
            a * self.mean_image + b * other.mean_image,
            n,
        )

    def save(self, path, provenance=None):
        """Write the three statistics as one stacked complex tensor plus a
        JSON sidecar ``<path>.json``."""
        stacked = np.stack([
            self.mean_spectrum,
            self.mean_abs_spectrum.astype(np.complex128),
            self.mean_image.astype(np.complex128),
        ])
        write_tensor(path, stacked, count=self.count)
        sidecar = {"count": self.count, "provenance": provenance}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        stacked = read_tensor(path)
        sidecar = json.loads(Path(str(path) + ".json").read_text())
        if stacked.shape[0] != 3:
            raise DataError(f"{path}: not an expectation bundle")
        return cls(stacked[0].copy(), stacked[1].real.copy(), stacked[2].real.copy(),
                   int(sidecar["count"]))


def bundle_of(collection):
    """Statistics of a nonempty collection of equally shaped images.

    Equivalent to folding :meth:`ExpectationBundle.accumulate`, but computed
    in one vectorized pass.
    """
    if len(collection) == 0:
        raise EmptyCollection("cannot take the expectation of an empty collection")
    try:
        batch = as_image(np.asarray(collection, dtype=np.float64))
    except ValueError as exc:
        raise DimensionMismatch(f"collection is not homogeneous: {exc}") from None
    if batch.ndim != 4:
        raise DimensionMismatch("collection must be a sequence of (c, H, W) images")
    spec = fft2(batch)
    return ExpectationBundle(spec.mean(axis=0), np.abs(spec).mean(axis=0),
                             batch.mean(axis=0), len(batch))
