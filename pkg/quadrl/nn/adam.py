from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from quadrl.domain.errors import NonFiniteError, ShapeError
from quadrl.nn.params import NetParams


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: NetParams, **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = [np.zeros_like(t) for t in params.tensors()]
        st.v = [np.zeros_like(t) for t in params.tensors()]
        return st


def adam_step(params: NetParams, grads: Sequence[np.ndarray], state: AdamState) -> NetParams:
    """
    Bias-corrected Adam, in place on params and state.
    Rejects the whole update (nothing mutated) if any gradient is non-finite.
    """
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise ShapeError(f"{len(grads)} gradients for {len(tensors)} parameter tensors")
    for g, p in zip(grads, tensors):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; update rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in tensors]
        state.v = [np.zeros_like(p) for p in tensors]

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(tensors, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)

    params.version += 1
    return params
