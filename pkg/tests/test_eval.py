"""Tests for edit-distance scoring, label collapsing, and trace rendering."""

from functools import lru_cache

import numpy as np
import pytest

from nat.checks import make_random_instance
from nat.evaluation import (
    EvalReport,
    export_emission_probs,
    identity_collapse,
    levenshtein,
    load_collapse_map,
    render_trace,
    score,
)
from nat.numerics import Rng, sigmoid
from nat.transducer import FREE, Trajectory


@lru_cache(maxsize=None)
def _brute_distance(hyp: tuple, ref: tuple) -> int:
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    return min(
        _brute_distance(hyp[1:], ref[1:]) + (hyp[0] != ref[0]),
        _brute_distance(hyp[1:], ref) + 1,
        _brute_distance(hyp, ref[1:]) + 1,
    )


def _traj_with_emissions(bits) -> Trajectory:
    bits = np.asarray(bits, dtype=np.int8)
    t = bits.shape[0]
    zeros = np.zeros(t)
    return Trajectory(
        emissions=bits,
        kinds=np.full(t, FREE, dtype=np.int8),
        positions=np.cumsum(bits).astype(np.int64),
        emit_probs=sigmoid(zeros),
        emit_logits=zeros,
        token_logprobs=zeros,
        emit_tokens=np.where(bits == 1, 1, -1).astype(np.int64),
        h_tops=np.zeros((t, 2)),
        out_dists=np.full((t, 3), 1.0 / 3),
    )


# ---------------------------------------------------------------------------
# levenshtein

def test_levenshtein_trivial_cases():
    assert levenshtein([1, 2, 3], [1, 2, 3]) == (0, 0, 0, 0)
    assert levenshtein([], []) == (0, 0, 0, 0)
    assert levenshtein([], [1, 2, 3]) == (3, 0, 0, 3)
    assert levenshtein([1, 2, 3], []) == (3, 0, 3, 0)


def test_levenshtein_single_edits():
    assert levenshtein([1, 9, 3], [1, 2, 3]) == (1, 1, 0, 0)
    assert levenshtein([1, 2, 3], [1, 3]) == (1, 0, 1, 0)
    assert levenshtein([1, 3], [1, 2, 3]) == (1, 0, 0, 1)


def test_levenshtein_classic_example():
    # kitten -> sitting: two substitutions plus one missing final token
    kitten = [1, 2, 3, 3, 4, 5]
    sitting = [6, 2, 3, 3, 2, 5, 7]
    assert levenshtein(kitten, sitting) == (3, 2, 0, 1)


def test_levenshtein_tie_breaking():
    # substitution preferred over insert+delete
    assert levenshtein([1], [2]) == (1, 1, 0, 0)
    # surplus hypothesis token counts as an insertion
    assert levenshtein([1, 1], [1]) == (1, 0, 1, 0)
    # missed reference token counts as a deletion
    assert levenshtein([1], [1, 1]) == (1, 0, 0, 1)


def test_levenshtein_matches_brute_force():
    rng = Rng(17)
    for _ in range(300):
        hyp = tuple(int(t) for t in
                    rng.integers(1, 4, size=int(rng.integers(0, 7))))
        ref = tuple(int(t) for t in
                    rng.integers(1, 4, size=int(rng.integers(0, 7))))
        d, s, i, dl = levenshtein(hyp, ref)
        assert d == _brute_distance(hyp, ref)
        assert s + i + dl == d


def test_levenshtein_metric_properties():
    rng = Rng(19)
    seqs = [
        [int(t) for t in rng.integers(1, 4, size=int(rng.integers(0, 6)))]
        for _ in range(12)
    ]
    for a in seqs[:6]:
        for b in seqs[6:]:
            dab, s_ab, i_ab, d_ab = levenshtein(a, b)
            dba, s_ba, i_ba, d_ba = levenshtein(b, a)
            assert dab == dba
            assert (s_ab, i_ab, d_ab) == (s_ba, d_ba, i_ba)
    for a, b, c in zip(seqs[:4], seqs[4:8], seqs[8:12]):
        assert levenshtein(a, c)[0] <= levenshtein(a, b)[0] + levenshtein(b, c)[0]


# ---------------------------------------------------------------------------
# label collapsing

def test_identity_collapse():
    assert np.array_equal(identity_collapse(4), [0, 1, 2, 3])


def test_load_collapse_map(tmp_path):
    path = tmp_path / "collapse.txt"
    path.write_text("# fold rare labels\n3 1\n\n4 1  # trailing comment\n")
    table = load_collapse_map(path, 5)
    assert np.array_equal(table, [0, 1, 2, 1, 1])


def test_load_collapse_map_errors(tmp_path):
    path = tmp_path / "collapse.txt"
    cases = ["1 2 3", "a 2", "1 9", "9 1", "0 2"]
    for text in cases:
        path.write_text(text + "\n")
        with pytest.raises(ValueError):
            load_collapse_map(path, 5)
    path.write_text("0 0\n")
    assert np.array_equal(load_collapse_map(path, 3), [0, 1, 2])


def test_collapse_equalizes_confusable_labels(tmp_path):
    hyps = [[1, 0]]
    refs = [[3, 0]]
    assert score(hyps, refs).error_rate == 1.0
    path = tmp_path / "collapse.txt"
    path.write_text("3 1\n")
    table = load_collapse_map(path, 5)
    assert score(hyps, refs, collapse=table).error_rate == 0.0


# ---------------------------------------------------------------------------
# corpus scoring

def test_score_strips_eos_everywhere():
    report = score([[1, 2, 0]], [[1, 2, 0]])
    assert report.error_rate == 0.0
    assert report.ref_tokens == 2
    # EOS is ignored wherever it appears, not only at the end
    report = score([[1, 0, 2]], [[0, 1, 2, 0]])
    assert report.error_rate == 0.0


def test_score_aggregates_over_corpus():
    hyps = [[1, 2], [4]]
    refs = [[1, 3], [4, 5]]
    report = score(hyps, refs)
    assert report.substitutions == 1
    assert report.insertions == 0
    assert report.deletions == 1
    assert report.ref_tokens == 4
    assert report.total_edits == 2
    assert report.error_rate == pytest.approx(0.5)


def test_score_empty_reference_edge_cases():
    assert score([[0]], [[0]]).error_rate == 0.0
    report = score([[1]], [[0]])
    assert report.ref_tokens == 0
    assert report.error_rate == float("inf")
    with pytest.raises(ValueError):
        score([[1]], [[1, 0], [2, 0]])


def test_score_invariant_under_label_permutation():
    rng = Rng(23)
    hyps, refs = [], []
    for _ in range(20):
        hyps.append([int(t) for t in
                     rng.integers(1, 6, size=int(rng.integers(1, 7)))] + [0])
        refs.append([int(t) for t in
                     rng.integers(1, 6, size=int(rng.integers(1, 7)))] + [0])
    base = score(hyps, refs)
    perm = np.concatenate([[0], 1 + Rng(29).permutation(5)])
    hyps2 = [[int(perm[t]) for t in h] for h in hyps]
    refs2 = [[int(perm[t]) for t in r] for r in refs]
    relabeled = score(hyps2, refs2)
    assert relabeled == EvalReport(base.substitutions, base.insertions,
                                   base.deletions, base.ref_tokens,
                                   base.error_rate)


# ---------------------------------------------------------------------------
# inspection helpers

def test_render_trace_groups_steps():
    traj = _traj_with_emissions([0, 0, 1, 0, 0, 0, 1])
    assert render_trace(traj, chars_per_step=3) == "x-x"
    assert render_trace(traj, chars_per_step=1) == "--x---x"
    assert render_trace(_traj_with_emissions([0, 0]), 5) == "-"
    with pytest.raises(ValueError):
        render_trace(traj, chars_per_step=0)


def test_export_emission_probs_rows():
    params, episode = make_random_instance(31)
    rows = export_emission_probs(params, episode, Rng(7))
    assert len(rows) == episode.t1
    assert [r[0] for r in rows] == list(range(1, episode.t1 + 1))
    assert all(0.0 <= r[1] <= 1.0 for r in rows)
    assert all(r[2] in (0, 1) for r in rows)
    assert sum(r[2] for r in rows) == episode.t2