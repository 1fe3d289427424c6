"""Adam on ascent-direction gradients, plus piecewise-linear run schedules.

The estimator produces ascent directions (maximize expected return), so the
descent direction handed to Adam is its negation plus L2 weight decay. Decay
applies to weight matrices and the embedding, never to bias vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .network import ModelParams, NumericError


def _is_bias(name: str) -> bool:
    return name.endswith("b_gates") or name == "b_baseline"


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ModelParams, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError(f"learning rate {lr!r} must be positive")
    return AdamState(
        m={name: np.zeros_like(a) for name, a in params.named_blocks()},
        v={name: np.zeros_like(a) for name, a in params.named_blocks()},
        t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: ModelParams, state: AdamState,
              ascent_grads: Dict[str, np.ndarray], l2_weight: float = 0.0,
              clip_norm: float = 0.0) -> Tuple[ModelParams, AdamState]:
    """One update; returns fresh params and state (inputs untouched).

    clip_norm > 0 rescales the whole ascent gradient to that global L2 norm
    when it exceeds it (off by default).
    """
    blocks = params.block_dict()
    missing = [n for n in blocks if n not in ascent_grads]
    if missing:
        raise ValueError(f"gradient missing blocks {missing}")
    for name, g in ascent_grads.items():
        if name not in blocks:
            raise ValueError(f"gradient for unknown block {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for block {name!r}")

    scale = 1.0
    if clip_norm > 0.0:
        sq = 0.0
        for g in ascent_grads.values():
            sq += float((g * g).sum())
        norm = np.sqrt(sq)
        if norm > clip_norm:
            scale = clip_norm / norm

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_blocks: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, theta in blocks.items():
        d = -scale * ascent_grads[name]
        if l2_weight > 0.0 and not _is_bias(name):
            d = d + l2_weight * theta
        m = b1 * state.m[name] + (1.0 - b1) * d
        v = b2 * state.v[name] + (1.0 - b2) * (d * d)
        new_blocks[name] = theta - state.lr * (m / bc1) / (np.sqrt(v / bc2)
                                                           + state.eps)
        new_m[name] = m
        new_v[name] = v
    return (ModelParams.from_blocks(new_blocks),
            AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps))


# ---------------------------------------------------------------------------
# schedules

@dataclass
class LinearSchedule:
    """Constant at `start` until ramp_begin, linear to `end` at ramp_end,
    constant afterwards."""

    start: float
    end: float
    ramp_begin: int
    ramp_end: int

    def __post_init__(self):
        if self.ramp_end <= self.ramp_begin:
            raise ValueError(
                f"ramp_end {self.ramp_end} must exceed ramp_begin {self.ramp_begin}"
            )


def schedule_value(sched: LinearSchedule, step: int) -> float:
    if step <= sched.ramp_begin:
        return sched.start
    if step >= sched.ramp_end:
        return sched.end
    frac = (step - sched.ramp_begin) / (sched.ramp_end - sched.ramp_begin)
    return sched.start + (sched.end - sched.start) * frac


def default_entropy_schedule() -> LinearSchedule:
    return LinearSchedule(1.0, 0.1, 10_000, 200_000)


def default_noise_schedule() -> LinearSchedule:
    return LinearSchedule(0.0, 0.15, 10_000, 200_000)


@dataclass
class Schedules:
    entropy: LinearSchedule = field(default_factory=default_entropy_schedule)
    noise_std: LinearSchedule = field(default_factory=default_noise_schedule)
    l2_weight: float = 0.001
    lr: float = 7e-5
