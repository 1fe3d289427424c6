"""Tests for synthetic data generation, mixing, stacking, and dataset files."""

import numpy as np
import pytest

from nat.data import (
    EOS_ID,
    DatasetDimensionError,
    DatasetMagicError,
    DatasetTruncatedError,
    DatasetVersionError,
    MixSpec,
    SyntheticTaskSpec,
    Utterance,
    gen_synthetic,
    make_pairing,
    mix_dataset,
    mix_signals,
    mix_utterances,
    read_dataset,
    read_vocab,
    stack_frames,
    stack_utterance,
    token_signatures,
    write_dataset,
    write_vocab,
)
from nat.numerics import Rng


def _task(**overrides):
    kwargs = dict(vocab_size=5, tokens_per_utterance=(2, 4),
                  frames_per_token=(2, 3), feature_dim=4, noise_std=0.05,
                  seed=13, stack_factor=1)
    kwargs.update(overrides)
    return SyntheticTaskSpec(**kwargs)


# ---------------------------------------------------------------------------
# utterances and task specs

def test_utterance_validation():
    ok = Utterance("u", np.zeros((3, 2)), [1, 2, EOS_ID])
    assert ok.frames.dtype == np.float64
    assert ok.targets.dtype == np.int64
    with pytest.raises(ValueError):
        Utterance("u", np.zeros(3), [1, EOS_ID])
    with pytest.raises(ValueError):
        Utterance("u", np.zeros((0, 2)), [1, EOS_ID])
    with pytest.raises(ValueError):
        Utterance("u", np.zeros((3, 2)), [])
    with pytest.raises(ValueError):
        Utterance("u", np.zeros((3, 2)), [1, 2])  # missing EOS
    with pytest.raises(ValueError):
        Utterance("u", np.zeros((3, 2)), [-1, EOS_ID])


def test_task_spec_validation():
    _task().__post_init__()
    bad = [
        dict(vocab_size=1),
        dict(tokens_per_utterance=(0, 3)),
        dict(tokens_per_utterance=(4, 2)),
        dict(frames_per_token=(0, 1)),
        dict(feature_dim=0),
        dict(stack_factor=0),
        dict(noise_std=-0.1),
    ]
    for overrides in bad:
        with pytest.raises(ValueError):
            _task(**overrides)


# ---------------------------------------------------------------------------
# generation

def test_generation_is_deterministic():
    a = gen_synthetic(_task(), 20)
    b = gen_synthetic(_task(), 20)
    assert [u.id for u in a] == [u.id for u in b]
    for x, y in zip(a, b):
        assert np.array_equal(x.frames, y.frames)
        assert np.array_equal(x.targets, y.targets)


def test_generation_basic_shape_rules():
    utts = gen_synthetic(_task(), 50)
    assert len(utts) == 50
    for u in utts:
        assert u.targets[-1] == EOS_ID
        assert np.all(u.targets[:-1] >= 1)
        assert np.all(u.targets[:-1] < 5)
        assert 3 <= len(u.targets) <= 5
        assert u.frames.shape[0] >= len(u.targets)
        assert u.frames.shape[1] == 4
        # frames survive the float32 storage round trip unchanged
        assert np.array_equal(
            u.frames, u.frames.astype(np.float32).astype(np.float64))


def test_skipped_prefix_matches_longer_run():
    task = _task()
    full = gen_synthetic(task, 10)
    head = gen_synthetic(task, 6)
    tail = gen_synthetic(task, 4, start=6)
    ids = [u.id for u in head + tail]
    assert ids == [u.id for u in full]
    for got, want in zip(head + tail, full):
        assert np.array_equal(got.frames, want.frames)
        assert np.array_equal(got.targets, want.targets)


def test_noiseless_frames_are_repeated_signatures():
    task = _task(noise_std=0.0, frames_per_token=(1, 1),
                 tokens_per_utterance=(3, 3))
    sig = token_signatures(task).astype(np.float32).astype(np.float64)
    for u in gen_synthetic(task, 10):
        toks = u.targets[:-1]
        # the last token's run is stretched by one frame so that the input
        # is long enough to hold all three tokens plus EOS
        assert u.frames.shape == (4, 4)
        assert np.array_equal(u.frames, sig[np.append(toks, toks[-1])])


def test_signatures_depend_only_on_seed():
    a = token_signatures(_task(noise_std=0.0))
    b = token_signatures(_task(noise_std=0.3, tokens_per_utterance=(1, 9)))
    assert np.array_equal(a, b)
    c = token_signatures(_task(seed=14))
    assert not np.array_equal(a, c)
    assert a.shape == (5, 4)
    assert np.all(np.abs(a) <= 1.0)


def test_token_usage_roughly_uniform():
    task = _task(vocab_size=8, tokens_per_utterance=(5, 7))
    counts = np.zeros(8)
    total = 0
    for u in gen_synthetic(task, 200):
        for t in u.targets[:-1]:
            counts[t] += 1
            total += 1
    assert counts[0] == 0  # EOS never appears as content
    p = 1.0 / 7
    se = np.sqrt(total * p * (1 - p))
    for t in range(1, 8):
        assert abs(counts[t] - total * p) < 4 * se + 1.0


def test_stack_factor_reserves_room_for_targets():
    task = _task(tokens_per_utterance=(2, 2), frames_per_token=(1, 1),
                 noise_std=0.0, stack_factor=3)
    for u in gen_synthetic(task, 5):
        stacked = stack_frames(u.frames, 3)
        assert stacked.shape[0] >= len(u.targets)
        # two 1-frame tokens need padding up to 3 * (2 + 1) = 9 raw frames
        assert u.frames.shape[0] == 9


def test_generation_validates_arguments():
    with pytest.raises(ValueError):
        gen_synthetic(_task(), 0)
    with pytest.raises(ValueError):
        gen_synthetic(_task(), 3, start=-1)


# ---------------------------------------------------------------------------
# mixing

def test_mix_signals_hand_example():
    p = np.asarray([2.0, -4.0])
    s = np.asarray([1.0, 2.0, -1.0])
    assert np.array_equal(mix_signals(p, s, 0.0), [0.5, -1.0])
    # secondary peak 2: normalized [0.5, 1.0] (truncated), kept at 1/4 level
    np.testing.assert_allclose(mix_signals(p, s, 0.25),
                               [0.5 + 0.125, -1.0 + 0.25])
    short = np.asarray([3.0])
    np.testing.assert_allclose(mix_signals(p, short, 0.5), [1.0, -1.0])


def test_mix_signals_validation():
    p = np.asarray([1.0, 2.0])
    with pytest.raises(ValueError):
        mix_signals(p, p, -0.1)
    with pytest.raises(ValueError):
        mix_signals(p, p, 1.1)
    with pytest.raises(ValueError):
        mix_signals(np.zeros(3), p, 0.5)
    with pytest.raises(ValueError):
        mix_signals(p, np.zeros(3), 0.5)


def test_mix_utterances_keeps_primary_identity():
    rng = Rng(3)
    a = Utterance("a", rng.normal(size=(4, 3)), [1, 2, EOS_ID])
    b = Utterance("b", rng.normal(size=(6, 3)), [2, EOS_ID])
    mixed = mix_utterances(a, b, 0.3)
    assert mixed.id == "a"
    assert np.array_equal(mixed.targets, a.targets)
    assert mixed.frames.shape == a.frames.shape
    assert not np.array_equal(mixed.frames, a.frames)


def test_self_mix_at_full_proportion_doubles_signal():
    rng = Rng(4)
    a = Utterance("a", rng.normal(size=(3, 2)), [1, EOS_ID])
    mixed = mix_utterances(a, a, 1.0)
    peak = np.abs(a.frames).max()
    np.testing.assert_allclose(mixed.frames, 2.0 * a.frames / peak, rtol=1e-6)


def test_confounder_energy_scales_with_proportion():
    rng = Rng(5)
    a = Utterance("a", rng.normal(size=(5, 3)), [1, EOS_ID])
    b = Utterance("b", rng.normal(size=(5, 3)), [2, EOS_ID])
    clean = mix_utterances(a, b, 0.0).frames
    last = 0.0
    for prop in (0.1, 0.25, 0.5):
        resid = np.linalg.norm(mix_utterances(a, b, prop).frames - clean)
        assert resid > last
        last = resid
    # the residual is exactly proportional to the mixing level
    r1 = np.linalg.norm(mix_utterances(a, b, 0.1).frames - clean)
    r5 = np.linalg.norm(mix_utterances(a, b, 0.5).frames - clean)
    assert r5 / r1 == pytest.approx(5.0, rel=1e-3)


def test_make_pairing_bijective_when_sizes_match():
    prim = gen_synthetic(_task(), 8)
    sec = gen_synthetic(_task(seed=99), 8, id_prefix="sec")
    pairing = make_pairing(prim, sec, seed=5)
    assert sorted(pairing.keys()) == sorted(u.id for u in prim)
    assert sorted(pairing.values()) == sorted(u.id for u in sec)
    assert pairing == make_pairing(prim, sec, seed=5)
    assert pairing != make_pairing(prim, sec, seed=6)


def test_make_pairing_cycles_smaller_secondary():
    prim = gen_synthetic(_task(), 5)
    sec = gen_synthetic(_task(seed=99), 2, id_prefix="sec")
    pairing = make_pairing(prim, sec, seed=5)
    used = list(pairing.values())
    assert set(used) == {u.id for u in sec}
    assert sorted(used.count(u.id) for u in sec) == [2, 3]
    with pytest.raises(ValueError):
        make_pairing([], sec, seed=5)


def test_mix_dataset_applies_fixed_pairing():
    prim = gen_synthetic(_task(), 4)
    sec = gen_synthetic(_task(seed=99), 4, id_prefix="sec")
    spec = MixSpec(0.25, make_pairing(prim, sec, seed=1))
    mixed = mix_dataset(prim, sec, spec)
    assert [u.id for u in mixed] == [u.id for u in prim]
    for got, src in zip(mixed, prim):
        assert np.array_equal(got.targets, src.targets)
    missing = MixSpec(0.25, {})
    with pytest.raises(ValueError):
        mix_dataset(prim, sec, missing)
    wrong = MixSpec(0.25, {u.id: "nope" for u in prim})
    with pytest.raises(ValueError):
        mix_dataset(prim, sec, wrong)


# ---------------------------------------------------------------------------
# stacking

def test_stack_frames_exact_layout():
    frames = np.arange(18, dtype=np.float64).reshape(9, 2)
    out = stack_frames(frames, 3)
    assert out.shape == (3, 6)
    np.testing.assert_array_equal(out[0], [0, 1, 2, 3, 4, 5])
    np.testing.assert_array_equal(out[2], [12, 13, 14, 15, 16, 17])


def test_stack_frames_pads_final_group():
    frames = np.ones((10, 3))
    out = stack_frames(frames, 3)
    assert out.shape == (4, 9)
    np.testing.assert_array_equal(out[3], [1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_stack_factor_one_returns_copy():
    frames = np.ones((4, 2))
    out = stack_frames(frames, 1)
    assert np.array_equal(out, frames)
    out[0, 0] = 7.0
    assert frames[0, 0] == 1.0
    utt = Utterance("u", frames, [1, EOS_ID])
    assert stack_utterance(utt, 1) is utt


def test_stack_frames_validation():
    with pytest.raises(ValueError):
        stack_frames(np.ones((0, 2)), 2)
    with pytest.raises(ValueError):
        stack_frames(np.ones(4), 2)
    with pytest.raises(ValueError):
        stack_frames(np.ones((4, 2)), 0)


# ---------------------------------------------------------------------------
# dataset files

def test_dataset_round_trip(tmp_path):
    utts = gen_synthetic(_task(), 12)
    path = tmp_path / "d.natd"
    write_dataset(utts, path)
    back = read_dataset(path)
    assert len(back) == 12
    for got, want in zip(back, utts):
        assert got.id == want.id
        assert np.array_equal(got.frames, want.frames)
        assert np.array_equal(got.targets, want.targets)


def test_dataset_write_errors(tmp_path):
    with pytest.raises(ValueError):
        write_dataset([], tmp_path / "x.natd")
    mixed_dims = [
        Utterance("a", np.zeros((2, 3)), [1, EOS_ID]),
        Utterance("b", np.zeros((2, 4)), [1, EOS_ID]),
    ]
    with pytest.raises(DatasetDimensionError):
        write_dataset(mixed_dims, tmp_path / "y.natd")


def test_dataset_read_errors(tmp_path):
    utts = gen_synthetic(_task(), 3)
    path = tmp_path / "d.natd"
    write_dataset(utts, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.natd"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetMagicError):
        read_dataset(bad)

    bad.write_bytes(raw[:4] + b"\x63" + raw[5:])
    with pytest.raises(DatasetVersionError):
        read_dataset(bad)

    bad.write_bytes(raw[: len(raw) - 5])
    with pytest.raises(DatasetTruncatedError):
        read_dataset(bad)

    bad.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetTruncatedError, match="trailing"):
        read_dataset(bad)


def test_vocab_round_trip(tmp_path):
    path = tmp_path / "vocab.txt"
    write_vocab(["<eos>", "aa", "bb"], path)
    assert read_vocab(path) == ["<eos>", "aa", "bb"]
    path.write_text("<eos>\naa\n\nbb\n")
    with pytest.raises(ValueError):
        read_vocab(path)
    path.write_text("\n\n")
    with pytest.raises(ValueError):
        read_vocab(path)
    with pytest.raises(ValueError):
        write_vocab([], tmp_path / "v2.txt")