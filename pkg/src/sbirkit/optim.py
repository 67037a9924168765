"""Adam and plain gradient descent over Tensor parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    scratch: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def optimizer_step(
    params: list[Tensor], grads: list[np.ndarray], lr: float, state: OptimizerState
) -> OptimizerState:
    """One update in place on ``params``; moments are keyed by parameter position."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter is required")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("optimizer_step: non-finite gradient")
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
        return state
    if state.kind != "adam":
        raise ValueError(f"unknown optimizer {state.kind!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = lr / c1
    for k, (p, g) in enumerate(zip(params, grads)):
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
            state.scratch[k] = np.empty_like(g)
        m, v, buf = state.m[k], state.v[k], state.scratch[k]
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        v *= b2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v += buf
        np.multiply(v, 1.0 / c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= step
        p.data = p.data - buf
    return state
