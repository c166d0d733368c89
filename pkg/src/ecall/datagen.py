"""Ground-truth kernels, blurred observations and unpaired dataset splits."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ecall.errors import DataError, EvenSize, InsufficientImages, InvalidStd
from ecall.io import file_sha256, read_tensor, write_tensor
from ecall.tensor import as_image, as_kernel, convolve_periodic, tap_offsets

# named presets: standard deviation in pixels (names follow the frequency response)
KERNEL_PRESETS = {"broad": 0.5, "medium": 1.0, "narrow": 2.0}


def gaussian_kernel(std, size):
    """Isotropic Gaussian sampled at integer offsets, truncated and normalized.

    Parameters
    ----------
    std : float
        Standard deviation in pixels.
    size : int
        Odd side length of the square window.
    """
    if not np.isfinite(std) or std <= 0:
        raise InvalidStd(f"std must be positive, got {std}")
    if int(size) != size or size < 1 or size % 2 == 0:
        raise EvenSize(f"kernel size must be a positive odd integer, got {size}")
    off = tap_offsets(int(size))
    g = np.exp(-(off ** 2) / (2.0 * std ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def preset_kernel(name, size):
    try:
        std = KERNEL_PRESETS[name.lower()]
    except KeyError:
        raise DataError(
            f"unknown kernel preset {name!r}; choose from {sorted(KERNEL_PRESETS)}"
        ) from None
    return gaussian_kernel(std, size)


def blur_and_noise(img, k, noise_frac, rng):
    """Return ``(k * img + noise, noise)``.

    The noise is i.i.d. Gaussian with standard deviation ``noise_frac *
    max(img)``. Nothing is clipped.
    """
    if noise_frac < 0:
        raise DataError(f"noise_frac must be >= 0, got {noise_frac}")
    img = as_image(img)
    blurred = convolve_periodic(img, k)
    if noise_frac == 0:
        return blurred, np.zeros_like(img)
    noise = rng.standard_normal(img.shape) * (noise_frac * np.max(img))
    return blurred + noise, noise


def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _ellipses(rng, height, width, count):
    yy, xx = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width))
    for _ in range(count):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(0.05, 0.3) * height
        rx = rng.uniform(0.05, 0.3) * width
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        out[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] += rng.uniform(-1, 1)
    return out


def _template(rng, channels, height, width):
    # structure shared by every image of a collection, the way aligned faces
    # share a layout; it keeps the mean spectrum away from zero
    base = 0.5 * _smooth_noise(rng, (height, width), 2.0)
    base += 0.3 * _smooth_noise(rng, (height, width), 0.7)
    base += 1.0 * _smooth_noise(rng, (height, width), 0.4)
    base += 0.6 * _ellipses(rng, height, width, 6)
    tint = rng.uniform(0.8, 1.2, size=(channels, 1, 1))
    return tint * base[np.newaxis]


def synthetic_textures(count, height, width, rng, channels=1):
    """Random images with a common structured component, clipped to [0, 1].

    Every image mixes a collection-wide template (smoothed noise and sharp
    ellipses) with its own smoothed noise, a linear gradient and ellipses.
    Per-image content is drawn from child generators spawned off ``rng``, so
    results do not depend on generation order.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    template = _template(rng, channels, height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    images = []
    for child in rng.spawn(count):
        amp = child.uniform(0.7, 1.3)
        own = 0.25 * _smooth_noise(child, (channels, height, width),
                                   (0, *[child.uniform(1.0, 4.0)] * 2))
        angle = child.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx / width + np.sin(angle) * yy / height) - 0.5
        own += 0.2 * child.uniform(0, 1) * ramp
        own += 0.3 * _ellipses(child, height, width, int(child.integers(0, 4)))
        img = 0.5 + 0.1 * (amp * template + own)
        images.append(np.clip(img, 0.0, 1.0))
    return images


@dataclass
class DatasetSplits:
    """Unpaired training collections plus a paired test set.

    Arrays are stacked as ``(N, c, H, W)``.
    """

    originals: np.ndarray
    observations: np.ndarray
    noises: np.ndarray
    test_originals: np.ndarray
    test_observations: np.ndarray
    kernel: np.ndarray
    noise_frac: float = 0.0
    membership: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.originals)

    @property
    def test(self):
        return list(zip(self.test_originals, self.test_observations))

    @property
    def image_shape(self):
        return self.originals.shape[1:]

    def save(self, directory, extra=None):
        """Write one tensor file per collection and a JSON manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in ("originals", "observations", "noises", "test_originals",
                     "test_observations", "kernel"):
            path = directory / f"{name}.bin"
            write_tensor(path, getattr(self, name))
            files[name] = {"path": path.name, "sha256": file_sha256(path)}
        manifest = {
            **self.meta,
            **(extra or {}),
            "noise_frac": self.noise_frac,
            "n": self.n,
            "n_test": len(self.test_originals),
            "image_shape": list(self.image_shape),
            "membership": self.membership,
            "files": files,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise DataError(f"{directory}: no manifest.json")
        manifest = json.loads(path.read_text())
        arrays = {name: read_tensor(directory / entry["path"])
                  for name, entry in manifest["files"].items()}
        meta = {k: v for k, v in manifest.items()
                if k not in ("files", "membership", "noise_frac")}
        return cls(noise_frac=manifest["noise_frac"],
                   membership=manifest.get("membership", {}), meta=meta, **arrays)


def make_splits(source_images, n, rng, kernel, noise_frac=0.0, n_test=None):
    """Shuffle ``source_images`` into disjoint originals / observation / test sets.

    Observations and test inputs are blurred with ``kernel`` and noised; the
    noise collection is sampled independently of both.
    """
    n_test = n if n_test is None else n_test
    kernel = as_kernel(kernel)
    if n < 1 or n_test < 0:
        raise DataError(f"invalid split sizes n={n}, n_test={n_test}")
    if len(source_images) < 2 * n + n_test:
        raise InsufficientImages(
            f"need {2 * n + n_test} source images, got {len(source_images)}"
        )
    order = rng.permutation(len(source_images))
    idx_x, idx_y = order[:n], order[n:2 * n]
    idx_t = order[2 * n:2 * n + n_test]
    src = [as_image(source_images[i]) for i in range(len(source_images))]

    originals = np.stack([src[i] for i in idx_x])
    observations = np.stack([blur_and_noise(src[i], kernel, noise_frac, rng)[0] for i in idx_y])
    noises = np.stack([
        rng.standard_normal(x.shape) * (noise_frac * np.max(x)) for x in originals
    ])
    shape = (0, *originals.shape[1:])
    test_x = np.stack([src[i] for i in idx_t]) if n_test else np.empty(shape)
    test_y = (np.stack([blur_and_noise(src[i], kernel, noise_frac, rng)[0] for i in idx_t])
              if n_test else np.empty(shape))
    membership = {
        "originals": idx_x.tolist(),
        "observations": idx_y.tolist(),
        "test": idx_t.tolist(),
    }
    return DatasetSplits(originals, observations, noises, test_x, test_y, kernel,
                         float(noise_frac), membership)


def generate_dataset(n, image_size, kernel_std, kernel_size, noise_frac, seed,
                     n_test=None, channels=1):
    """Synthetic textures end to end: the dataset the CLI ``generate`` writes."""
    n_test = n if n_test is None else n_test
    rng = np.random.default_rng(seed)
    images = synthetic_textures(2 * n + n_test, image_size, image_size, rng, channels)
    splits = make_splits(images, n, rng, gaussian_kernel(kernel_std, kernel_size),
                         noise_frac, n_test)
    splits.meta = {
        "seed": seed,
        "kernel": {"std": kernel_std, "size": kernel_size},
        "image_size": image_size,
        "channels": channels,
        "source": "synthetic_textures",
    }
    return splits
