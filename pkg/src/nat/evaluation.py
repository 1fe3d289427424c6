"""Edit-distance scoring and emission-timing inspection.

Token error rate is corpus-level: total edits over total reference tokens,
with EOS stripped from both sides and an optional many-to-one label collapse
applied before alignment. The alignment backtrace breaks cost ties preferring
substitution, then deletion (reference token skipped), then insertion
(hypothesis token surplus), so reported S/I/D counts are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import EOS_ID
from .numerics import Rng
from .transducer import EpisodeInput, Trajectory, sample_trajectory
from .network import ModelParams


def levenshtein(hyp: Sequence[int], ref: Sequence[int]
                ) -> Tuple[int, int, int, int]:
    """Edit distance with unit costs; returns (distance, subs, ins, dels).

    Insertions are hypothesis tokens with no reference counterpart, deletions
    are reference tokens the hypothesis missed.
    """
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        hi = hyp[i - 1]
        row = d[i]
        prev = d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (hi != ref[j - 1]),
                         row[j - 1] + 1,
                         prev[j] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 and j > 0:
        cost = hyp[i - 1] != ref[j - 1]
        if d[i][j] == d[i - 1][j - 1] + cost:
            subs += int(cost)
            i -= 1
            j -= 1
        elif d[i][j] == d[i][j - 1] + 1:
            dels += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    dels += j
    ins += i
    return d[n][m], subs, ins, dels


@dataclass
class EvalReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_tokens: int
    error_rate: float

    @property
    def total_edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def identity_collapse(vocab_size: int) -> np.ndarray:
    return np.arange(vocab_size, dtype=np.int64)


def load_collapse_map(path, vocab_size: int) -> np.ndarray:
    """Many-to-one label map, one "<from> <to>" integer pair per line with
    '#' comments; unlisted ids map to themselves and EOS must stay EOS."""
    table = identity_collapse(vocab_size)
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8")
                                 .splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<from> <to>', got {raw!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(
                f"{path}:{lineno}: non-integer label in {raw!r}"
            ) from None
        if not (0 <= src < vocab_size and 0 <= dst < vocab_size):
            raise ValueError(
                f"{path}:{lineno}: label outside vocabulary of size {vocab_size}"
            )
        if src == EOS_ID and dst != EOS_ID:
            raise ValueError(f"{path}:{lineno}: EOS may not be remapped")
        table[src] = dst
    return table


def _prepare(tokens: Sequence[int], collapse: Optional[np.ndarray]) -> List[int]:
    out = [int(t) for t in tokens if int(t) != EOS_ID]
    if collapse is not None:
        out = [int(collapse[t]) for t in out]
    return out


def score(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]],
          collapse: Optional[np.ndarray] = None) -> EvalReport:
    """Corpus-level token error rate over aligned hypothesis/reference pairs."""
    if len(hyps) != len(refs):
        raise ValueError(
            f"{len(hyps)} hypotheses vs {len(refs)} references"
        )
    subs = ins = dels = ref_total = 0
    for hyp, ref in zip(hyps, refs):
        h = _prepare(hyp, collapse)
        r = _prepare(ref, collapse)
        _, s, i, dl = levenshtein(h, r)
        subs += s
        ins += i
        dels += dl
        ref_total += len(r)
    edits = subs + ins + dels
    if ref_total == 0:
        rate = 0.0 if edits == 0 else float("inf")
    else:
        rate = edits / ref_total
    return EvalReport(subs, ins, dels, ref_total, rate)


def render_trace(traj: Trajectory, chars_per_step: int = 3) -> str:
    """Compress the emission pattern into a glance-sized string: each output
    character covers `chars_per_step` input steps, 'x' if any of them emitted,
    '-' otherwise."""
    if chars_per_step < 1:
        raise ValueError(f"chars_per_step {chars_per_step!r} must be >= 1")
    e = np.asarray(traj.emissions, dtype=bool)
    t = e.shape[0]
    groups = -(-t // chars_per_step)
    padded = np.zeros(groups * chars_per_step, dtype=bool)
    padded[:t] = e
    hit = padded.reshape(groups, chars_per_step).any(axis=1)
    return "".join("x" if h else "-" for h in hit)


def export_emission_probs(params: ModelParams, episode: EpisodeInput,
                          rng: Rng) -> List[Tuple[int, float, int]]:
    """Sample one trajectory and tabulate (step, emit_prob, emitted) rows,
    steps 1-based; ready to write as CSV."""
    traj = sample_trajectory(params, episode, rng)
    return [(i + 1, float(traj.emit_probs[i]), int(traj.emissions[i]))
            for i in range(len(traj))]
