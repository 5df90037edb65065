#!/usr/bin/env python3
"""
MSVL Toolkit — Adaptive-Moment Optimizer
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from autograd import Tensor
from utils.errors import RejectedInputError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """Bias-corrected adaptive-moment update, applied to `params` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise RejectedInputError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != np.shape(g) or p.data.shape != m.shape:
            raise RejectedInputError(f"adam_step: param {p.data.shape} vs grad {np.shape(g)} vs moment {m.shape}")

    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
