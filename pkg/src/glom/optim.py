"""Bias-corrected Adam with time-based learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON


def adam_step(params: dict, grads: dict, state: AdamState, config) -> None:
    """Update ``params`` in place (arrays or Tensors) from ``grads``.

    The step size at iteration ``t`` (counted before the increment) is
    ``lr / (1 + decay * t)``.  With ``config.decay_mode == "decoupled"`` the
    decay instead shrinks the weights directly and the step size stays fixed.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    lr = config.learning_rate
    decoupled = getattr(config, "decay_mode", "lr") == "decoupled"
    lr_t = lr if decoupled else lr / (1.0 + config.decay * state.t)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g.shape != data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr_t * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        if decoupled:
            data -= lr * config.decay * data
        data -= update.astype(data.dtype, copy=False)
