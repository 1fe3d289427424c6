"""Synthetic utterance generation, signal mixing, frame stacking, and file I/O.

The clean task is a copy task in disguise: each token has a fixed random
signature vector, an utterance repeats each token's signature for a few frames
with additive Gaussian noise, and the target is the token string plus EOS.
Mixing overlays a peak-normalized confounder utterance at a given proportion,
which is how the harder corrupted-input tasks are built.

Datasets are single files: magic "NATD", a format version, an utterance count,
then per utterance the id, float32 frames, and uint32 targets, all
little-endian. Frames are stored float32 and widened to float64 in memory, so
a write/read round trip is exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import Rng

EOS_ID = 0

_MAGIC = b"NATD"
_VERSION = 1

# fixed stream tags so generation and pairing never collide with training draws
_STREAM_GEN = 101
_STREAM_PAIR = 202


class DatasetError(Exception):
    pass


class DatasetMagicError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetDimensionError(DatasetError):
    pass


@dataclass
class Utterance:
    id: str
    frames: np.ndarray   # (T1, feature_dim) float64
    targets: np.ndarray  # (T2,) int64, last entry is EOS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"utterance {self.id!r}: frames must be (T, F), T >= 1")
        if self.targets.ndim != 1 or self.targets.shape[0] < 1:
            raise ValueError(f"utterance {self.id!r}: targets must be non-empty")
        if self.targets[-1] != EOS_ID:
            raise ValueError(f"utterance {self.id!r}: targets must end with EOS")
        if (self.targets < 0).any():
            raise ValueError(f"utterance {self.id!r}: negative token id")


@dataclass
class SyntheticTaskSpec:
    """Token-signature copy task.

    stack_factor must match the stacking applied downstream: the generator
    pads the final token's run so that after stacking by that factor the
    input is still at least as long as the target (T2 <= T1).
    """

    vocab_size: int
    tokens_per_utterance: Tuple[int, int]  # inclusive range
    frames_per_token: Tuple[int, int]      # inclusive range
    feature_dim: int
    noise_std: float
    seed: int
    stack_factor: int = 1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (EOS plus content)")
        lo, hi = self.tokens_per_utterance
        if not 1 <= lo <= hi:
            raise ValueError("bad tokens_per_utterance range")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ValueError("bad frames_per_token range")
        if self.feature_dim < 1 or self.stack_factor < 1:
            raise ValueError("feature_dim and stack_factor must be >= 1")
        if self.noise_std < 0:
            raise ValueError("negative noise_std")


def token_signatures(task: SyntheticTaskSpec) -> np.ndarray:
    """Per-token signature vectors in [-1, 1], row 0 unused (EOS is silent)."""
    rng = Rng(task.seed, _STREAM_GEN)
    return rng.uniform(size=(task.vocab_size, task.feature_dim)) * 2.0 - 1.0


def gen_synthetic(task: SyntheticTaskSpec, count: int,
                  id_prefix: str = "syn", start: int = 0) -> List[Utterance]:
    """Utterances `start .. start+count-1` of the task's stream.

    Signatures depend only on the seed and each utterance only on its index,
    so disjoint index ranges from one seed give train/dev splits that share
    the token rendering but no utterances.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if start < 0:
        raise ValueError("start must be >= 0")
    base = Rng(task.seed, _STREAM_GEN)
    sig = token_signatures(task)
    lo_t, hi_t = task.tokens_per_utterance
    lo_f, hi_f = task.frames_per_token
    utts = []
    for u in range(start, start + count):
        rng = base.derive(7, u)
        n = int(rng.integers(lo_t, hi_t + 1))
        toks = rng.integers(1, task.vocab_size, size=n)
        runs = rng.integers(lo_f, hi_f + 1, size=n)
        # leave room for every target token (and EOS) even after stacking
        need = task.stack_factor * (n + 1)
        short = need - int(runs.sum())
        if short > 0:
            runs[-1] += short
        frames = np.repeat(sig[toks], runs, axis=0)
        if task.noise_std > 0:
            frames = frames + task.noise_std * rng.normal(size=frames.shape)
        frames = frames.astype(np.float32).astype(np.float64)  # storage precision
        targets = np.concatenate([toks, [EOS_ID]])
        utts.append(Utterance(f"{id_prefix}-{u:05d}", frames, targets))
    return utts


# ---------------------------------------------------------------------------
# mixing

def mix_signals(primary: np.ndarray, secondary: np.ndarray,
                proportion: float) -> np.ndarray:
    """Peak-normalize both signals, then add `proportion` of the secondary.

    The secondary is truncated or zero-padded to the primary's length. At
    proportion 0 the output is exactly the peak-normalized primary.
    """
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"mixing proportion {proportion!r} outside [0, 1]")
    p = np.asarray(primary, dtype=np.float64).ravel()
    peak = np.abs(p).max() if p.size else 0.0
    if peak == 0.0:
        raise ValueError("all-zero primary signal cannot be peak-normalized")
    p = p / peak
    if proportion == 0.0:
        return p
    s = np.asarray(secondary, dtype=np.float64).ravel()
    speak = np.abs(s).max() if s.size else 0.0
    if speak == 0.0:
        raise ValueError("all-zero secondary signal cannot be peak-normalized")
    s = s / speak
    if s.shape[0] >= p.shape[0]:
        s = s[:p.shape[0]]
    else:
        s = np.concatenate([s, np.zeros(p.shape[0] - s.shape[0])])
    return p + proportion * s


def mix_utterances(primary: Utterance, secondary: Utterance,
                   proportion: float) -> Utterance:
    """Overlay the secondary's frames onto the primary's; targets stay the
    primary's (the model must learn to ignore the confounder)."""
    mixed = mix_signals(primary.frames.ravel(), secondary.frames.ravel(),
                        proportion)
    mixed = mixed.reshape(primary.frames.shape)
    mixed = mixed.astype(np.float32).astype(np.float64)
    return Utterance(primary.id, mixed, primary.targets.copy())


@dataclass
class MixSpec:
    """Mixing proportion plus a fixed pairing of primary to secondary ids."""

    proportion: float
    pairing: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError(f"mixing proportion {self.proportion!r} outside [0, 1]")


def make_pairing(primary: Sequence[Utterance], secondary: Sequence[Utterance],
                 seed: int) -> Dict[str, str]:
    """Seeded pairing; a bijection when the splits are the same size, reused
    cyclically otherwise."""
    if not primary or not secondary:
        raise ValueError("cannot pair empty utterance lists")
    perm = Rng(seed, _STREAM_PAIR).permutation(len(secondary))
    return {
        utt.id: secondary[int(perm[k % len(secondary)])].id
        for k, utt in enumerate(primary)
    }


def mix_dataset(primary: Sequence[Utterance], secondary: Sequence[Utterance],
                spec: MixSpec) -> List[Utterance]:
    by_id = {utt.id: utt for utt in secondary}
    out = []
    for utt in primary:
        sid = spec.pairing.get(utt.id)
        if sid is None:
            raise ValueError(f"no pairing entry for utterance {utt.id!r}")
        if sid not in by_id:
            raise ValueError(f"pairing names unknown secondary utterance {sid!r}")
        out.append(mix_utterances(utt, by_id[sid], spec.proportion))
    return out


# ---------------------------------------------------------------------------
# stacking

def stack_frames(frames: np.ndarray, factor: int) -> np.ndarray:
    """Concatenate consecutive groups of `factor` frames; the last group is
    zero-padded. (T, F) -> (ceil(T/factor), factor*F)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("stack_frames expects a non-empty (T, F) array")
    if factor < 1:
        raise ValueError(f"stack factor {factor!r} must be >= 1")
    if factor == 1:
        return frames.copy()
    t, f = frames.shape
    t_out = -(-t // factor)
    padded = np.zeros((t_out * factor, f))
    padded[:t] = frames
    return padded.reshape(t_out, factor * f)


def stack_utterance(utt: Utterance, factor: int) -> Utterance:
    if factor == 1:
        return utt
    return Utterance(utt.id, stack_frames(utt.frames, factor),
                     utt.targets.copy())


# ---------------------------------------------------------------------------
# dataset files

def write_dataset(utts: Sequence[Utterance], path) -> None:
    if not utts:
        raise ValueError("refusing to write an empty dataset")
    dim = utts[0].frames.shape[1]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(utts)))
        for utt in utts:
            if utt.frames.shape[1] != dim:
                raise DatasetDimensionError(
                    f"utterance {utt.id!r} has dim {utt.frames.shape[1]}, "
                    f"dataset has dim {dim}"
                )
            idb = utt.id.encode("utf-8")
            f.write(struct.pack("<I", len(idb)))
            f.write(idb)
            t1 = utt.frames.shape[0]
            f.write(struct.pack("<II", t1, dim))
            f.write(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())
            f.write(struct.pack("<I", len(utt.targets)))
            f.write(np.ascontiguousarray(utt.targets, dtype="<u4").tobytes())


def read_dataset(path) -> List[Utterance]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DatasetMagicError(
            f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}"
        )
    if len(data) < 12:
        raise DatasetTruncatedError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise DatasetVersionError(
            f"{path}: format version {version}, expected {_VERSION}"
        )
    off = 12
    utts: List[Utterance] = []
    dim: Optional[int] = None

    def take(n: int) -> int:
        nonlocal off
        if len(data) < off + n:
            raise DatasetTruncatedError(
                f"{path}: truncated at byte {off} (utterance {len(utts)})"
            )
        off += n
        return off - n

    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, take(4))
        uid = data[take(nlen):off].decode("utf-8")
        t1, d = struct.unpack_from("<II", data, take(8))
        if t1 < 1 or d < 1:
            raise DatasetDimensionError(
                f"{path}: utterance {uid!r} has empty frames ({t1} x {d})"
            )
        if dim is None:
            dim = d
        elif d != dim:
            raise DatasetDimensionError(
                f"{path}: utterance {uid!r} has dim {d}, dataset has dim {dim}"
            )
        frames = np.frombuffer(data, dtype="<f4", count=t1 * d,
                               offset=take(t1 * d * 4)).reshape(t1, d)
        (t2,) = struct.unpack_from("<I", data, take(4))
        targets = np.frombuffer(data, dtype="<u4", count=t2,
                                offset=take(t2 * 4))
        utts.append(Utterance(uid, frames.astype(np.float64),
                              targets.astype(np.int64)))
    if off != len(data):
        raise DatasetTruncatedError(
            f"{path}: {len(data) - off} trailing bytes after {count} utterances"
        )
    return utts


# ---------------------------------------------------------------------------
# vocab files

def write_vocab(symbols: Sequence[str], path) -> None:
    if not symbols:
        raise ValueError("empty vocabulary")
    Path(path).write_text("".join(s + "\n" for s in symbols), encoding="utf-8")


def read_vocab(path) -> List[str]:
    """One symbol per line; the line number is the token id and line 0 must be
    the EOS symbol."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    symbols = [ln.strip() for ln in lines]
    while symbols and symbols[-1] == "":
        symbols.pop()
    if not symbols:
        raise ValueError(f"{path}: empty vocabulary file")
    if any(s == "" for s in symbols):
        raise ValueError(f"{path}: blank line inside vocabulary")
    return symbols
