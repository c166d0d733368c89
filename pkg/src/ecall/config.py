"""Run configuration: loss weights, per-phase schedules and dataset parameters.

Defaults are the desk-scale settings (64x64 grayscale, N=200, 15-tap
kernels). :func:`full_scale` returns the full-size schedule.
"""

import json
from dataclasses import asdict, dataclass, fields, is_dataclass, replace

import numpy as np

from ecall.errors import ConfigInvalid


@dataclass(frozen=True)
class EcallWeights:
    lambda_a1: float = 0.0
    lambda_a2: float = 0.0
    lambda_b1: float = 0.0
    lambda_b2: float = 0.0
    lambda_c1: float = 0.0
    lambda_c2: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigInvalid(f"{f.name} must be finite and >= 0, got {v}")


PHASE1_WEIGHTS = EcallWeights(lambda_a1=1, lambda_c1=5)
PHASE2_WEIGHTS = EcallWeights(lambda_a1=10, lambda_a2=10, lambda_b1=1, lambda_b2=1,
                              lambda_c1=5, lambda_c2=10)
PHASE3_WEIGHTS = EcallWeights(lambda_b2=1, lambda_c2=10)


@dataclass(frozen=True)
class PhaseConfig:
    iters: int
    weights: EcallWeights
    lr_kernel: float = 0.0
    lr_filter: float = 0.0
    # mini-batch for the image terms of L_B / L_C
    batch_size: int = 2


@dataclass(frozen=True)
class SupervisedConfig:
    iters: int = 20000
    lr_kernel: float = 1e-4
    lr_filter: float = 1e-3
    lambda_kernel: float = 5.0
    batch_size: int = 2


@dataclass(frozen=True)
class EcallConfig:
    image_size: int = 64
    channels: int = 1
    n: int = 200
    n_test: int = 50
    kernel_std: float = 1.0
    kernel_size: int = 15
    noise_frac: float = 0.0
    seed: int = 0
    mask_frac: float = 0.2
    # None: the full collection on every step
    kernel_batch: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # None: 1e-8 * max |E[x^]|^2
    closed_form_eps: float | None = None
    # E[R y] in L_C: "batch" or "full" collection
    lc_expectation: str = "batch"
    # full_scale() runs 10^3 / 10^4 / 10^4 steps; from a delta start the 15-tap
    # narrow kernel needs ~3000 steps at lr 1e-3, and the filter gains move
    # about lr per step, hence the longer filter-only phase
    phase1: PhaseConfig = PhaseConfig(3000, PHASE1_WEIGHTS, lr_kernel=1e-3)
    phase2: PhaseConfig = PhaseConfig(2000, PHASE2_WEIGHTS, lr_kernel=1e-4, lr_filter=1e-3)
    phase3: PhaseConfig = PhaseConfig(20000, PHASE3_WEIGHTS, lr_filter=1e-3)
    supervised: SupervisedConfig = SupervisedConfig()
    threads: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigInvalid(f"kernel_size must be odd, got {self.kernel_size}")
        if self.kernel_size > self.image_size:
            raise ConfigInvalid("kernel_size exceeds image_size")
        if not 0 <= self.mask_frac < 1:
            raise ConfigInvalid(f"mask_frac must lie in [0, 1), got {self.mask_frac}")
        if self.noise_frac < 0:
            raise ConfigInvalid("noise_frac must be >= 0")
        if self.lc_expectation not in ("batch", "full"):
            raise ConfigInvalid("lc_expectation must be 'batch' or 'full'")
        for ph in (self.phase1, self.phase2, self.phase3):
            if ph.iters < 0 or ph.batch_size < 1:
                raise ConfigInvalid(f"invalid phase settings {ph}")

    def adam(self, lr):
        return dict(learning_rate=lr, beta1=self.beta1, beta2=self.beta2,
                    epsilon=self.adam_eps, weight_decay=self.weight_decay)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def full_scale():
    """256x256 RGB, N=10^3, 31-tap kernels and the 10^3/10^4/10^4 schedule."""
    return EcallConfig(
        image_size=256, channels=3, n=1000, n_test=1000, kernel_size=31,
        phase1=PhaseConfig(1000, PHASE1_WEIGHTS, lr_kernel=1e-3),
        phase2=PhaseConfig(10000, PHASE2_WEIGHTS, lr_kernel=1e-4, lr_filter=1e-3),
        phase3=PhaseConfig(10000, PHASE3_WEIGHTS, lr_filter=1e-3),
        supervised=SupervisedConfig(iters=20000),
    )


def _check_keys(base, data, path=""):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path or 'config'}: expected an object")
    known = {f.name for f in fields(base)}
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    for name, value in data.items():
        if is_dataclass(getattr(base, name)):
            _check_keys(getattr(base, name), value, f"{path}{name}.")


def _merge(base, overrides):
    out = {}
    for name, value in overrides.items():
        current = getattr(base, name)
        out[name] = replace(current, **_merge(current, value)) if is_dataclass(current) else value
    return out


def from_dict(data, base=None):
    """Overlay ``data`` (nested dict, possibly partial) onto ``base``."""
    base = base or EcallConfig()
    _check_keys(base, data)
    try:
        return replace(base, **_merge(base, data))
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None


def load_config(path, base=None):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return from_dict(data, base)
