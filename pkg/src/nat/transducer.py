"""Online transduction: per input step the model decides whether to emit.

At step i (1-based) the stack reads [x_i; emitted bit from step i-1; embedding
of the last emitted token] and produces an emission probability b_i. The
emission decision is sampled, except where the budget forces it:

  * every target already emitted        -> forced silent
  * remaining targets exceed the steps
    strictly after this one             -> forced emit

i.e. a step is forced to emit exactly when T1 - i < T2 - p(i-1), where p(i-1)
counts prior emissions. Under this rule the feasible emission patterns are
precisely the binary strings with T2 ones, every sampled trajectory emits the
whole target, and trajectory probabilities are products over free steps only.

Rollouts run on (dim, K) batches; sampling, enumeration, and decoding all go
through the same single code path at K = 1 or K = N so results never depend on
which entry point produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Tuple

import numpy as np

from .data import EOS_ID
from .network import ModelParams, Tape, init_state, lstm_forward
from .numerics import Rng, log_sigmoid, sigmoid

# step kinds
FREE = 0
FORCED_EMIT = 1
FORCED_SILENT = 2

# exact enumeration is C(T1, T2) rollouts; beyond this, sample instead
MAX_ENUM_STEPS = 12


@dataclass
class EpisodeInput:
    features: np.ndarray  # (T1, feature_dim) float64
    targets: np.ndarray   # (T2,) int64, EOS-terminated

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (T1, F) array")
        if self.targets.ndim != 1 or self.targets.shape[0] < 1:
            raise ValueError("targets must be a non-empty vector")
        t1, t2 = self.features.shape[0], self.targets.shape[0]
        if t2 > t1:
            raise ValueError(
                f"target length T2={t2} exceeds input length T1={t1}; "
                "the model emits at most one token per input step"
            )
        if self.targets[-1] != EOS_ID:
            raise ValueError("targets must end with EOS")

    @property
    def t1(self) -> int:
        return self.features.shape[0]

    @property
    def t2(self) -> int:
        return self.targets.shape[0]


@dataclass
class Trajectory:
    """One completed rollout; arrays are indexed by input step."""

    emissions: np.ndarray       # (T1,) int8, the sampled/forced bits
    kinds: np.ndarray           # (T1,) int8, FREE / FORCED_EMIT / FORCED_SILENT
    positions: np.ndarray       # (T1,) int64, emitted count after each step
    emit_probs: np.ndarray      # (T1,) float64, b_i
    emit_logits: np.ndarray     # (T1,) float64, w_emit . h_i
    token_logprobs: np.ndarray  # (T1,) float64, log d_i[y] at emitting steps else 0
    emit_tokens: np.ndarray     # (T1,) int64, emitted token id or -1
    h_tops: np.ndarray          # (T1, H) float64
    out_dists: np.ndarray       # (T1, V) float64
    tape: Optional[Tape] = None

    def __len__(self) -> int:
        return self.emissions.shape[0]


@dataclass
class RolloutBatch:
    """K rollouts of one episode, batch-last arrays."""

    k: int
    emissions: np.ndarray       # (T1, K) int8
    kinds: np.ndarray           # (T1, K) int8
    positions: np.ndarray       # (T1, K) int64
    emit_probs: np.ndarray      # (T1, K)
    emit_logits: np.ndarray     # (T1, K)
    token_logprobs: np.ndarray  # (T1, K)
    emit_tokens: np.ndarray     # (T1, K) int64
    h_tops: np.ndarray          # (T1, H, K)
    out_dists: np.ndarray       # (T1, V, K)
    tape: Optional[Tape] = None

    def trajectory(self, j: int = 0) -> Trajectory:
        return Trajectory(
            emissions=self.emissions[:, j].copy(),
            kinds=self.kinds[:, j].copy(),
            positions=self.positions[:, j].copy(),
            emit_probs=self.emit_probs[:, j].copy(),
            emit_logits=self.emit_logits[:, j].copy(),
            token_logprobs=self.token_logprobs[:, j].copy(),
            emit_tokens=self.emit_tokens[:, j].copy(),
            h_tops=self.h_tops[:, :, j].copy(),
            out_dists=self.out_dists[:, :, j].copy(),
            tape=self.tape if (self.k == 1 and j == 0) else None,
        )


@dataclass
class Hypothesis:
    """Greedy decode result: tokens plus the 1-based steps they appeared at."""

    tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    emit_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def rollout(params: ModelParams, episode: EpisodeInput, k: int,
            uniforms: Optional[np.ndarray] = None,
            forced_emissions: Optional[np.ndarray] = None,
            record_tape: bool = False) -> RolloutBatch:
    """Run K coupled rollouts of one episode.

    uniforms: (T1, K) draws consumed at free steps (required if any step can
    be free and forced_emissions is not given). forced_emissions: (T1, K)
    0/1 pattern to follow instead of sampling (must respect the forcing rule).
    """
    t1, t2 = episode.t1, episode.t2
    feat = episode.features
    targets = episode.targets
    f_dim = feat.shape[1]
    in0 = params.layers[0].input_size
    if f_dim + 1 + params.embed_size != in0:
        raise ValueError(
            f"feature dimension mismatch: features ({f_dim}) + emission bit (1) "
            f"+ embedding ({params.embed_size}) != first layer input ({in0})"
        )
    if targets.max() >= params.vocab_size:
        raise ValueError(
            f"target id {int(targets.max())} outside vocabulary "
            f"(size {params.vocab_size})"
        )
    hid = params.hidden_size
    vocab = params.vocab_size

    state = init_state(params, k)
    tokens = np.full(k, params.bos_id, dtype=np.int64)
    b_prev = np.zeros(k)
    pos = np.zeros(k, dtype=np.int64)
    cols = np.arange(k)

    emissions = np.empty((t1, k), dtype=np.int8)
    kinds = np.empty((t1, k), dtype=np.int8)
    positions = np.empty((t1, k), dtype=np.int64)
    emit_probs = np.empty((t1, k))
    emit_logits = np.empty((t1, k))
    token_logprobs = np.empty((t1, k))
    emit_tokens = np.empty((t1, k), dtype=np.int64)
    h_tops = np.empty((t1, hid, k))
    out_dists = np.empty((t1, vocab, k))
    tape = Tape(f_dim, params.embed_size) if record_tape else None

    for i in range(t1):
        tok_in = tokens
        u = np.empty((in0, k))
        u[:f_dim] = feat[i][:, None]
        u[f_dim] = b_prev
        u[f_dim + 1:] = params.embedding[tok_in].T
        recs: Optional[list] = [] if record_tape else None
        state, h = lstm_forward(params, state, u, tape=recs, step=i + 1)

        zb = (params.w_emit @ h)[0]
        b = sigmoid(zb)
        zo = params.w_out @ h
        m = zo.max(axis=0)
        ez = np.exp(zo - m)
        s = ez.sum(axis=0)
        d = ez / s
        lse = m + np.log(s)

        remaining = t2 - pos
        silent = remaining == 0
        forced = ~silent & (remaining > t1 - (i + 1))
        free_mask = ~(silent | forced)
        if forced_emissions is not None:
            emit = forced_emissions[i].astype(bool)
            if (emit & silent).any() or (~emit & forced).any():
                raise ValueError(
                    f"given emission pattern violates the forcing rule at "
                    f"step {i + 1}"
                )
        elif free_mask.any():
            if uniforms is None:
                raise ValueError("free steps present but no uniforms supplied")
            emit = forced | (free_mask & (uniforms[i] < b))
        else:
            emit = forced
        pos = pos + emit
        ytok = targets[pos - 1]  # only meaningful where emit; masked below
        lp = zo[ytok, cols] - lse

        emissions[i] = emit
        kinds[i] = np.where(silent, FORCED_SILENT,
                            np.where(forced, FORCED_EMIT, FREE))
        positions[i] = pos
        emit_probs[i] = b
        emit_logits[i] = zb
        token_logprobs[i] = np.where(emit, lp, 0.0)
        emit_tokens[i] = np.where(emit, ytok, -1)
        h_tops[i] = h
        out_dists[i] = d

        tokens = np.where(emit, ytok, tokens)
        b_prev = emit.astype(np.float64)
        if record_tape:
            tape.add_step(recs, tok_in)

    return RolloutBatch(
        k=k, emissions=emissions, kinds=kinds, positions=positions,
        emit_probs=emit_probs, emit_logits=emit_logits,
        token_logprobs=token_logprobs, emit_tokens=emit_tokens,
        h_tops=h_tops, out_dists=out_dists, tape=tape,
    )


def sample_trajectory(params: ModelParams, episode: EpisodeInput, rng: Rng,
                      record_tape: bool = False) -> Trajectory:
    uniforms = None
    if episode.t1 != episode.t2:
        uniforms = rng.uniform(size=(episode.t1, 1))
    batch = rollout(params, episode, 1, uniforms=uniforms,
                    record_tape=record_tape)
    return batch.trajectory(0)


def log_rho(traj: Trajectory) -> float:
    """Log-probability of the trajectory's emission pattern; forced steps
    contribute nothing."""
    free = traj.kinds == FREE
    if not free.any():
        return 0.0
    z = np.where(traj.emissions == 1, traj.emit_logits, -traj.emit_logits)
    return float(log_sigmoid(z[free]).sum())


def enumerate_trajectories(params: ModelParams, episode: EpisodeInput,
                           record_tape: bool = False
                           ) -> List[Tuple[Trajectory, float]]:
    """All feasible trajectories with their exact probabilities, in a fixed
    (lexicographic) order. Intractable beyond small T1; errors rather than
    grinding (use Monte Carlo sampling for anything larger)."""
    t1, t2 = episode.t1, episode.t2
    if t1 > MAX_ENUM_STEPS:
        raise ValueError(
            f"T1={t1} too large for exact enumeration (limit {MAX_ENUM_STEPS}); "
            "use Monte Carlo sampling instead"
        )
    out = []
    for chosen in combinations(range(t1), t2):
        pattern = np.zeros((t1, 1), dtype=np.int8)
        pattern[list(chosen)] = 1
        batch = rollout(params, episode, 1, forced_emissions=pattern,
                        record_tape=record_tape)
        traj = batch.trajectory(0)
        out.append((traj, float(np.exp(log_rho(traj)))))
    return out


def greedy_decode(params: ModelParams, features: np.ndarray,
                  max_tokens: Optional[int] = None) -> Hypothesis:
    """Deterministic decoding: emit whenever b_i >= 0.5, pick the argmax token
    (lowest id on ties), stop after EOS or max_tokens emissions."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("features must be a non-empty (T1, F) array")
    t1, f_dim = features.shape
    in0 = params.layers[0].input_size
    if f_dim + 1 + params.embed_size != in0:
        raise ValueError(
            f"feature dimension mismatch: features ({f_dim}) + emission bit (1) "
            f"+ embedding ({params.embed_size}) != first layer input ({in0})"
        )
    if max_tokens is None:
        max_tokens = t1
    state = init_state(params, 1)
    token = params.bos_id
    b_prev = 0.0
    toks: List[int] = []
    steps: List[int] = []
    for i in range(t1):
        u = np.empty((in0, 1))
        u[:f_dim, 0] = features[i]
        u[f_dim, 0] = b_prev
        u[f_dim + 1:, 0] = params.embedding[token]
        state, h = lstm_forward(params, state, u, step=i + 1)
        b = float(sigmoid((params.w_emit @ h)[0, 0]))
        if b >= 0.5:
            d = params.w_out @ h[:, 0]
            tok = int(np.argmax(d))
            toks.append(tok)
            steps.append(i + 1)
            token = tok
            b_prev = 1.0
            if tok == EOS_ID or len(toks) >= max_tokens:
                break
        else:
            b_prev = 0.0
    return Hypothesis(np.asarray(toks, dtype=np.int64),
                      np.asarray(steps, dtype=np.int64))
