"""AdamW: adaptive moments with weight decay applied directly to the parameters."""

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def create(cls, params, **hyper):
        shape = np.shape(params)
        return cls(np.zeros(shape), np.zeros(shape), 0, **hyper)


def optimizer_step(state, params, grads):
    """One AdamW update; returns ``(new_params, new_state)``.

    ``params`` and ``grads`` are real arrays of equal shape. Complex
    parameters should be passed as ``z.view(np.float64)``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    step = m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * params
    new = params - state.learning_rate * step
    return new, replace(state, first_moment=m, second_moment=v, step_count=t)
