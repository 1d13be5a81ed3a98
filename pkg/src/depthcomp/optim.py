"""Adam with bias correction, optional L2 weight decay, and step-halving schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .autograd import Tensor

log = logging.getLogger(__name__)


def lr_schedule(epoch: int, lr0: float = 1e-5, halve_every: int = 5) -> float:
    """lr0 * 0.5 ** floor(epoch / halve_every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if halve_every <= 0:
        raise ValueError(f"halve_every must be positive, got {halve_every}")
    return lr0 * 0.5 ** (epoch // halve_every)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    skipped_steps: int = 0
    history: list = field(default_factory=list)  # step indices that were skipped

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_update(params: Sequence[Tensor], state: AdamState, lr: float) -> bool:
    """One in-place Adam step from each parameter's ``.grad``.

    Missing grads count as zero. If any gradient is non-finite the whole step
    is skipped (moments untouched), the event is logged and counted, and False
    is returned.
    """
    if len(params) != len(state.m):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    grads = []
    for p, m in zip(params, state.m):
        if p.data.shape != m.shape:
            raise ValueError(f"parameter shape {p.data.shape} does not match moment buffer {m.shape}")
        grads.append(np.zeros_like(p.data) if p.grad is None else p.grad)
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped_steps += 1
        state.history.append(state.step)
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
    return True
