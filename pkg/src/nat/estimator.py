"""Stochastic policy-gradient estimation for the emission decisions.

Per-step rewards are R_i = b~_i * log d_i[y] plus an optional entropy bonus at
free steps. The gradient of the expected return decomposes into a pathwise
part (token and entropy terms differentiated with the decisions held fixed)
and a score part routed through the emission logit:

    sum_j  A_j * d log p(b~_j) / d z_j ,   A_j = sum_{i >= j} R_i - Omega_j

where d log p / d z = b~ - b and Omega_j is a baseline that may depend on the
past of the trajectory and on the sibling samples, but never on the present
or future of its own sample, which keeps the estimate unbiased. Forced steps
have no decision and contribute no score signal at all.

Everything runs on (T, K) batches: K rollouts share one forward pass and one
taped backward pass, and the estimate is the K-sample mean. A fully forced
episode (T1 == T2) is deterministic, so the batch collapses to K = 1 and the
mean is exact by construction.

Entropy bonus modes at free steps:
  symmetric   R_i -= lambda * log p(decision taken)   (true entropy ascent)
  asymmetric  R_i += -lambda * b~_i log b_i + lambda (1 - b~_i) log(1 - b_i)
              (penalizes confident emission but *rewards* confident silence)

An optional alternative pressure replaces/augments that with a KL pull toward
a target emission rate q: R_i -= w * KL(Bern(q) || Bern(b_i)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import ModelParams, NumericError, backward, zero_grads
from .numerics import Rng, log_sigmoid
from .transducer import (FREE, EpisodeInput, RolloutBatch, Trajectory,
                         enumerate_trajectories, rollout)

BASELINE_KINDS = ("none", "parametric", "leave-one-out")
ENTROPY_MODES = ("symmetric", "asymmetric")


@dataclass
class EstimatorConfig:
    k: int = 16
    baseline: str = "leave-one-out"
    entropy_weight: float = 0.0
    entropy_mode: str = "symmetric"
    kl_target_rate: Optional[float] = None
    kl_weight: float = 0.0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"sample count k={self.k} must be >= 1")
        if self.baseline not in BASELINE_KINDS:
            raise ValueError(
                f"unknown baseline {self.baseline!r}; choose from {BASELINE_KINDS}"
            )
        if self.baseline == "leave-one-out" and self.k < 2:
            raise ValueError("leave-one-out baseline needs k >= 2")
        if self.entropy_weight < 0:
            raise ValueError(f"negative entropy weight {self.entropy_weight!r}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ValueError(
                f"unknown entropy mode {self.entropy_mode!r}; "
                f"choose from {ENTROPY_MODES}"
            )
        if self.kl_target_rate is not None:
            if not 0.0 < self.kl_target_rate < 1.0:
                raise ValueError(
                    f"kl target rate {self.kl_target_rate!r} outside (0, 1)"
                )
            if self.kl_weight < 0:
                raise ValueError(f"negative kl weight {self.kl_weight!r}")


@dataclass
class RewardTrace:
    rewards: np.ndarray  # (T1,)
    total: float


@dataclass
class GradEstimate:
    blocks: Dict[str, np.ndarray]
    mean_reward: float
    score_variance: float
    k: int


# ---------------------------------------------------------------------------
# rewards; the _matrix helpers take (T, K) arrays and serve both the batched
# estimator and the per-trajectory public functions

def _reward_matrix(token_logprobs, kinds, emissions, emit_logits,
                   entropy_weight: float, mode: str) -> np.ndarray:
    r = token_logprobs.copy()
    if entropy_weight > 0.0:
        free = kinds == FREE
        if free.any():
            emitted = emissions == 1
            if mode == "symmetric":
                z = np.where(emitted, emit_logits, -emit_logits)
                r[free] -= entropy_weight * log_sigmoid(z[free])
            elif mode == "asymmetric":
                bonus = np.where(
                    emitted,
                    -entropy_weight * log_sigmoid(emit_logits),
                    entropy_weight * log_sigmoid(-emit_logits),
                )
                r[free] += bonus[free]
            else:
                raise ValueError(f"unknown entropy mode {mode!r}")
    return r


def _kl_delta_matrix(kinds, emit_logits, target_rate: float,
                     weight: float) -> np.ndarray:
    """-w * KL(Bern(q) || Bern(b)) at free steps, 0 elsewhere."""
    q = target_rate
    kl = (q * (np.log(q) - log_sigmoid(emit_logits))
          + (1.0 - q) * (np.log(1.0 - q) - log_sigmoid(-emit_logits)))
    return np.where(kinds == FREE, -weight * kl, 0.0)


def step_rewards(traj: Trajectory, entropy_weight: float,
                 mode: str = "symmetric") -> RewardTrace:
    if entropy_weight < 0:
        raise ValueError(f"negative entropy weight {entropy_weight!r}")
    r = _reward_matrix(traj.token_logprobs, traj.kinds, traj.emissions,
                       traj.emit_logits, entropy_weight, mode)
    return RewardTrace(r, float(r.sum()))


def kl_rate_penalty(traj: Trajectory, target_rate: float,
                    weight: float) -> np.ndarray:
    """Per-step reward delta pulling free-step emission probabilities toward
    a target rate; add it to a RewardTrace's rewards."""
    if not 0.0 < target_rate < 1.0:
        raise ValueError(f"target rate {target_rate!r} outside (0, 1)")
    if weight < 0:
        raise ValueError(f"negative kl weight {weight!r}")
    return _kl_delta_matrix(traj.kinds, traj.emit_logits, target_rate, weight)


# ---------------------------------------------------------------------------
# baselines

def parametric_baseline(h_tops: np.ndarray, params: ModelParams) -> np.ndarray:
    """Predicted future return per step, w_baseline . h + b. (T, H) -> (T,)."""
    return (params.w_baseline @ h_tops.T)[0] + params.b_baseline[0]


def _loo_matrix(r: np.ndarray) -> np.ndarray:
    """Leave-one-out baseline on a (T, ..., K) reward array, siblings along
    the last axis.

    For sample k at step j: the sibling mean of the future return, plus the
    sibling-mean excess of the past return over sample k's own past,

        Omega_jk = mean_{k' != k} F_jk' + mean_{k' != k} (P_jk' - P_jk)

    with F the inclusive suffix sums and P the exclusive prefix sums. The
    second term cancels shared past randomness without biasing the estimate,
    since it never involves sample k's present or future.
    """
    k = r.shape[-1]
    f = np.cumsum(r[::-1], axis=0)[::-1]
    p = r.sum(axis=0)[None] - f
    col_f = f.sum(axis=-1, keepdims=True)
    col_p = p.sum(axis=-1, keepdims=True)
    return (col_f - f + col_p - k * p) / (k - 1)


def loo_baseline(traces: Sequence[RewardTrace]) -> np.ndarray:
    """Leave-one-out baselines for K sibling reward traces; returns (K, T)."""
    if len(traces) < 2:
        raise ValueError("leave-one-out baseline needs at least 2 samples")
    t = traces[0].rewards.shape[0]
    if any(tr.rewards.shape[0] != t for tr in traces):
        raise ValueError("reward traces have mismatched lengths")
    r = np.stack([tr.rewards for tr in traces], axis=1)  # (T, K)
    return _loo_matrix(r).T


# ---------------------------------------------------------------------------
# gradient signals shared by the sampled and exact estimators

def _emission_signals(batch_like, advantage: np.ndarray, cfg: EstimatorConfig
                      ) -> np.ndarray:
    """(T, K) gradient on the emission logits: pathwise entropy/KL terms plus
    the score term advantage * (b~ - b), all masked to free steps."""
    kinds = batch_like.kinds
    emissions = batch_like.emissions
    b = batch_like.emit_probs
    free = kinds == FREE
    bt = emissions.astype(np.float64)
    g = advantage * (bt - b)
    lam = cfg.entropy_weight
    if lam > 0.0:
        if cfg.entropy_mode == "symmetric":
            g = g - lam * (bt - b)
        else:
            g = g - lam * (bt * (1.0 - b) + (1.0 - bt) * b)
    if cfg.kl_target_rate is not None and cfg.kl_weight > 0.0:
        g = g + cfg.kl_weight * (cfg.kl_target_rate - b)
    return np.where(free, g, 0.0)


def _output_signals(batch_like) -> np.ndarray:
    """(T, V, K) gradient on the output logits: one-hot(y) - d at emitting
    steps, zero elsewhere (maximizing log d[y])."""
    d = batch_like.out_dists
    emit_tokens = batch_like.emit_tokens
    emitting = emit_tokens >= 0
    g = np.where(emitting[:, None, :], -d, 0.0)
    ti, ki = np.nonzero(emitting)
    g[ti, emit_tokens[ti, ki], ki] += 1.0
    return g


def _check_finite(blocks: Dict[str, np.ndarray], context: str) -> None:
    # one scalar probe; any NaN/inf anywhere poisons the grand total
    total = 0.0
    for arr in blocks.values():
        total += float(arr.sum())
    if not math.isfinite(total):
        bad = [name for name, arr in blocks.items()
               if not np.all(np.isfinite(arr))]
        raise NumericError(
            f"non-finite gradient in blocks {bad or ['<overflowing sum>']} "
            f"({context})"
        )


# ---------------------------------------------------------------------------
# sampled estimator

def policy_gradient(params: ModelParams, episode: EpisodeInput,
                    cfg: EstimatorConfig, rng: Rng,
                    draws: int = 1) -> GradEstimate:
    """K-sample policy gradient with the configured baseline.

    Returns ascent-direction gradients (K-sample mean), the mean augmented
    return, and the K-sample variance of the score-term magnitude as a
    variance diagnostic.

    draws > 1 runs that many independent K-sample estimates through one
    batched pass and returns their average; identical in law to averaging
    `draws` separate calls, and what the Monte Carlo verification uses to
    stay inside its time budget.
    """
    cfg.validate()
    if draws < 1:
        raise ValueError(f"draws={draws} must be >= 1")
    t1, t2 = episode.t1, episode.t2
    # a fully forced episode has no decisions: every sample is identical and
    # the K-mean equals the single rollout exactly, so don't draw K at all
    if t1 == t2:
        k_eff, d_eff = 1, 1
    else:
        k_eff, d_eff = cfg.k, draws
    cols = k_eff * d_eff
    uniforms = rng.uniform(size=(t1, cols)) if t1 != t2 else None
    batch = rollout(params, episode, cols, uniforms=uniforms,
                    record_tape=True)

    r = _reward_matrix(batch.token_logprobs, batch.kinds, batch.emissions,
                       batch.emit_logits, cfg.entropy_weight, cfg.entropy_mode)
    if cfg.kl_target_rate is not None and cfg.kl_weight > 0.0:
        r = r + _kl_delta_matrix(batch.kinds, batch.emit_logits,
                                 cfg.kl_target_rate, cfg.kl_weight)
    totals = r.sum(axis=0)                       # (cols,)
    future = np.cumsum(r[::-1], axis=0)[::-1]    # inclusive suffix sums
    free = batch.kinds == FREE

    omega_all = None
    omega = np.zeros_like(r)
    if free.any():
        if cfg.baseline == "parametric":
            omega_all = (np.einsum("h,thk->tk", params.w_baseline[0],
                                   batch.h_tops) + params.b_baseline[0])
            omega = omega_all
        elif cfg.baseline == "leave-one-out" and k_eff >= 2:
            if d_eff > 1:
                # siblings share a draw; keep groups separate
                omega = _loo_matrix(
                    r.reshape(t1, d_eff, k_eff)).reshape(t1, cols)
            else:
                omega = _loo_matrix(r)

    advantage = np.where(free, future - omega, 0.0)
    g_emit = _emission_signals(batch, advantage, cfg)
    g_out = _output_signals(batch)
    grads = backward(params, batch.tape, g_emit=g_emit, g_out=g_out)
    if cols > 1:
        for arr in grads.values():
            arr /= cols

    if cfg.baseline == "parametric":
        # fit the baseline head to observed future returns by least squares;
        # gradients stop at the head (h is treated as data)
        if omega_all is None:
            omega_all = (np.einsum("h,thk->tk", params.w_baseline[0],
                                   batch.h_tops) + params.b_baseline[0])
        resid = (omega_all - future) / cols
        grads["w_baseline"] = -np.einsum("tk,thk->h", resid,
                                         batch.h_tops)[None, :]
        grads["b_baseline"] = -np.asarray([resid.sum()])

    if k_eff > 1:
        score = (advantage * (batch.emissions.astype(np.float64)
                              - batch.emit_probs)).sum(axis=0)
        score_variance = float(
            score.reshape(d_eff, k_eff).var(axis=1).mean())
    else:
        score_variance = 0.0
    _check_finite(grads, f"policy gradient, k={k_eff}")
    return GradEstimate(grads, float(totals.mean()), score_variance, cfg.k)


# ---------------------------------------------------------------------------
# exact estimator (small instances): full enumeration of the trajectory law

def _augmented_rewards_traj(traj: Trajectory, cfg: EstimatorConfig) -> np.ndarray:
    r = _reward_matrix(traj.token_logprobs, traj.kinds, traj.emissions,
                       traj.emit_logits, cfg.entropy_weight, cfg.entropy_mode)
    if cfg.kl_target_rate is not None and cfg.kl_weight > 0.0:
        r = r + _kl_delta_matrix(traj.kinds, traj.emit_logits,
                                 cfg.kl_target_rate, cfg.kl_weight)
    return r


def exact_expected_reward(params: ModelParams, episode: EpisodeInput,
                          cfg: EstimatorConfig) -> float:
    """E[R] by exhaustive enumeration; the target of finite-difference checks."""
    total = 0.0
    for traj, prob in enumerate_trajectories(params, episode):
        total += prob * float(_augmented_rewards_traj(traj, cfg).sum())
    return total


def exact_gradient(params: ModelParams, episode: EpisodeInput,
                   cfg: EstimatorConfig) -> GradEstimate:
    """d E[R] / d theta by exhaustive enumeration,

        sum_tau rho(tau) [ grad R(tau) + R(tau) grad log rho(tau) ] .

    The baseline head blocks come back zero: E[R] does not depend on them
    (baselines only reshape the sampled estimator's variance).
    """
    cfg.validate()
    acc = zero_grads(params)
    expected = 0.0
    for traj, prob in enumerate_trajectories(params, episode,
                                             record_tape=True):
        r = _augmented_rewards_traj(traj, cfg)
        total = float(r.sum())
        # whole-trajectory score coefficient; no baseline in the exact sum
        adv = np.full((len(traj), 1), total)
        tb = _TrajCols(traj)
        g_emit = _emission_signals(tb, adv, cfg)
        g_out = _output_signals(tb)
        g = backward(params, traj.tape, g_emit=g_emit, g_out=g_out)
        for name, arr in g.items():
            acc[name] += prob * arr
        expected += prob * total
    _check_finite(acc, "exact gradient")
    return GradEstimate(acc, expected, 0.0, 0)


class _TrajCols:
    """Adapter presenting a single trajectory as a (T, 1) batch."""

    def __init__(self, traj: Trajectory):
        self.kinds = traj.kinds[:, None]
        self.emissions = traj.emissions[:, None]
        self.emit_probs = traj.emit_probs[:, None]
        self.emit_tokens = traj.emit_tokens[:, None]
        self.out_dists = traj.out_dists[:, :, None]
