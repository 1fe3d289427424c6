"""Stacked LSTM with emission and output heads, plus exact backprop through time.

All parameters are plain float64 arrays and every gradient is derived by hand
(no autodiff), so the backward pass is checked against finite differences in
the test suite. Forward steps operate on (dim, batch) columns; a single rollout
is just batch size 1, which keeps one code path for sampling and for
multi-sample estimation.

Per layer the gate pre-activations are stacked row-wise in the order
input, forget, output, candidate:

    z = W_gates @ [u; h_prev] + b_gates          z: (4H, B)
    i, f, o = sigmoid(z[:3H]),  g = tanh(z[3H:])
    c = f * c_prev + i * g,     h = o * tanh(c)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numerics import Rng, sigmoid, softmax_stable


class NumericError(RuntimeError):
    """Non-finite value produced during rollout or estimation."""

    def __init__(self, message: str, step: Optional[int] = None,
                 layer: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.layer = layer


@dataclass
class LstmLayer:
    w_gates: np.ndarray  # (4H, input+H), gate rows ordered i, f, o, g
    b_gates: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.w_gates.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.w_gates.shape[1] - self.hidden_size

    # per-gate views into the stacked blocks
    def _w(self, k: int) -> np.ndarray:
        h = self.hidden_size
        return self.w_gates[k * h:(k + 1) * h]

    def _b(self, k: int) -> np.ndarray:
        h = self.hidden_size
        return self.b_gates[k * h:(k + 1) * h]

    @property
    def w_i(self): return self._w(0)
    @property
    def w_f(self): return self._w(1)
    @property
    def w_o(self): return self._w(2)
    @property
    def w_g(self): return self._w(3)
    @property
    def b_i(self): return self._b(0)
    @property
    def b_f(self): return self._b(1)
    @property
    def b_o(self): return self._b(2)
    @property
    def b_g(self): return self._b(3)


@dataclass
class ModelParams:
    """Full parameter set. The embedding has vocab+1 rows; the last row is the
    beginning-of-sequence symbol fed before anything has been emitted."""

    layers: List[LstmLayer]
    embedding: np.ndarray   # (vocab+1, embed)
    w_emit: np.ndarray      # (1, H)  emission-probability head
    w_out: np.ndarray       # (V, H)  output-token head
    w_baseline: np.ndarray  # (1, H)  return-baseline head
    b_baseline: np.ndarray  # (1,)

    @property
    def vocab_size(self) -> int:
        return self.w_out.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_out.shape[1]

    @property
    def embed_size(self) -> int:
        return self.embedding.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[0].input_size - 1 - self.embed_size

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    def named_blocks(self) -> List[Tuple[str, np.ndarray]]:
        out: List[Tuple[str, np.ndarray]] = []
        for n, layer in enumerate(self.layers):
            out.append((f"layers.{n}.w_gates", layer.w_gates))
            out.append((f"layers.{n}.b_gates", layer.b_gates))
        out.append(("embedding", self.embedding))
        out.append(("w_emit", self.w_emit))
        out.append(("w_out", self.w_out))
        out.append(("w_baseline", self.w_baseline))
        out.append(("b_baseline", self.b_baseline))
        return out

    def block_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.named_blocks())

    def copy(self) -> "ModelParams":
        return ModelParams.from_blocks(
            {name: arr.copy() for name, arr in self.named_blocks()}
        )

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray]) -> "ModelParams":
        n_layers = 0
        while f"layers.{n_layers}.w_gates" in blocks:
            n_layers += 1
        if n_layers == 0:
            raise ValueError("no LSTM layer blocks present")
        layers = []
        for n in range(n_layers):
            w = np.asarray(blocks[f"layers.{n}.w_gates"], dtype=np.float64)
            b = np.asarray(blocks[f"layers.{n}.b_gates"], dtype=np.float64).ravel()
            if w.shape[0] != b.shape[0] or w.shape[0] % 4 != 0:
                raise ValueError(f"inconsistent gate shapes in layer {n}")
            layers.append(LstmLayer(w, b))
        try:
            params = cls(
                layers=layers,
                embedding=np.asarray(blocks["embedding"], dtype=np.float64),
                w_emit=np.asarray(blocks["w_emit"], dtype=np.float64).reshape(1, -1),
                w_out=np.asarray(blocks["w_out"], dtype=np.float64),
                w_baseline=np.asarray(blocks["w_baseline"],
                                      dtype=np.float64).reshape(1, -1),
                b_baseline=np.asarray(blocks["b_baseline"],
                                      dtype=np.float64).ravel(),
            )
        except KeyError as e:
            raise ValueError(f"missing parameter block {e.args[0]!r}") from None
        h = params.hidden_size
        if params.w_emit.shape[1] != h or params.w_baseline.shape[1] != h:
            raise ValueError("head width disagrees with hidden size")
        if params.embedding.shape[0] != params.vocab_size + 1:
            raise ValueError("embedding must have vocab+1 rows (last row is BOS)")
        return params


def init_params(feature_dim: int, vocab_size: int, hidden_size: int,
                num_layers: int, embed_size: int, rng: Rng,
                init_scale: float = 0.05) -> ModelParams:
    """Uniform init in [-init_scale, init_scale]; forget-gate bias forced to 1."""
    if min(feature_dim, vocab_size, hidden_size, num_layers, embed_size) < 1:
        raise ValueError("all model dimensions must be positive")

    def u(*shape):
        return (rng.uniform(size=shape) * 2.0 - 1.0) * init_scale

    layers = []
    in_size = feature_dim + 1 + embed_size
    for _ in range(num_layers):
        w = u(4 * hidden_size, in_size + hidden_size)
        b = u(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0
        layers.append(LstmLayer(w, b))
        in_size = hidden_size
    return ModelParams(
        layers=layers,
        embedding=u(vocab_size + 1, embed_size),
        w_emit=u(1, hidden_size),
        w_out=u(vocab_size, hidden_size),
        w_baseline=u(1, hidden_size),
        b_baseline=u(1),
    )


# ---------------------------------------------------------------------------
# forward

LstmState = List[Tuple[np.ndarray, np.ndarray]]  # per layer (h, c), each (H, B)


def init_state(params: ModelParams, batch: int = 1) -> LstmState:
    h = params.hidden_size
    return [(np.zeros((h, batch)), np.zeros((h, batch)))
            for _ in params.layers]


def step_input(x: np.ndarray, b_prev: float, token_prev: int,
               params: ModelParams) -> np.ndarray:
    """Concatenate acoustic features, previous emission bit, and the embedding
    of the previously emitted token (BOS before the first emission)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if not 0 <= token_prev <= params.bos_id:
        raise ValueError(
            f"token id {token_prev} outside vocabulary (0..{params.bos_id})"
        )
    out = np.concatenate([x, [float(b_prev)], params.embedding[token_prev]])
    expect = params.layers[0].input_size
    if out.shape[0] != expect:
        raise ValueError(
            f"feature dimension mismatch: built input of length {out.shape[0]}, "
            f"first layer expects {expect}"
        )
    return out


class _LayerRec:
    __slots__ = ("uh", "i", "f", "o", "g", "c_prev", "tc", "h")


class Tape:
    """Activation cache from a rollout, sufficient for the exact backward pass."""

    def __init__(self, feature_dim: int, embed_size: int):
        self.feature_dim = feature_dim
        self.embed_size = embed_size
        self.steps: List[List[_LayerRec]] = []
        self.tokens: List[np.ndarray] = []  # token ids fed at each step, (B,)

    def add_step(self, layer_recs: List[_LayerRec], tokens_in: np.ndarray):
        self.steps.append(layer_recs)
        self.tokens.append(tokens_in)

    def __len__(self) -> int:
        return len(self.steps)


def lstm_forward(params: ModelParams, state: LstmState, inp: np.ndarray,
                 tape: Optional[List[_LayerRec]] = None,
                 step: Optional[int] = None) -> Tuple[LstmState, np.ndarray]:
    """One time step through the stack; inp is (input_size, B).

    Returns the new state and the top hidden vector (H, B). When `tape` is a
    list, one record per layer is appended for the backward pass.
    """
    if inp.ndim != 2 or inp.shape[0] != params.layers[0].input_size:
        raise ValueError(
            f"input shape {inp.shape} does not match first layer "
            f"input size {params.layers[0].input_size}"
        )
    new_state: LstmState = []
    for n, layer in enumerate(params.layers):
        h_prev, c_prev = state[n]
        uh = np.concatenate((inp, h_prev), axis=0)
        z = layer.w_gates @ uh
        z += layer.b_gates[:, None]
        hid = layer.hidden_size
        act = sigmoid(z[:3 * hid])
        g = np.tanh(z[3 * hid:])
        i, f, o = act[:hid], act[hid:2 * hid], act[2 * hid:]
        c = f * c_prev + i * g
        if not math.isfinite(float(c.sum())) and not np.all(np.isfinite(c)):
            raise NumericError(
                f"non-finite LSTM cell at step {step}, layer {n}", step, n
            )
        tc = np.tanh(c)
        h = o * tc
        if tape is not None:
            rec = _LayerRec()
            rec.uh, rec.i, rec.f, rec.o, rec.g = uh, i, f, o, g
            rec.c_prev, rec.tc, rec.h = c_prev, tc, h
            tape.append(rec)
        new_state.append((h, c))
        inp = h
    return new_state, inp


def emission_prob(h_top: np.ndarray, params: ModelParams) -> float:
    """Probability of emitting at this step, sigma(w_emit . h)."""
    h_top = np.asarray(h_top, dtype=np.float64).ravel()
    return float(sigmoid(params.w_emit @ h_top)[0])


def output_dist(h_top: np.ndarray, params: ModelParams) -> np.ndarray:
    """Distribution over output tokens given the top hidden vector."""
    h_top = np.asarray(h_top, dtype=np.float64).ravel()
    return softmax_stable(params.w_out @ h_top)


def apply_weight_noise(params: ModelParams, std: float, rng: Rng) -> ModelParams:
    """Gaussian perturbation of every weight and bias; std 0 is the identity."""
    if std < 0:
        raise ValueError(f"negative noise std {std!r}")
    if std == 0.0:
        return params
    blocks = {
        name: arr + std * rng.normal(size=arr.shape)
        for name, arr in params.named_blocks()
    }
    return ModelParams.from_blocks(blocks)


# ---------------------------------------------------------------------------
# backward

def zero_grads(params: ModelParams) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_blocks()}


def backward(params: ModelParams, tape: Tape,
             g_h: Optional[np.ndarray] = None,
             g_emit: Optional[np.ndarray] = None,
             g_out: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Exact reverse pass over a taped rollout.

    Gradient signals, any of which may be None (treated as zero):
      g_h    (T, H, B)  direct gradient on the top hidden vector
      g_emit (T, B)     gradient on the emission logit w_emit . h
      g_out  (T, V, B)  gradient on the output-token logits w_out . h

    Returns ascent-direction gradients summed over the batch axis, one array
    per named parameter block (baseline head blocks come back zero; they are
    fit by their own regression, not through the recurrence).
    """
    t_len = len(tape)
    for name, sig in (("g_h", g_h), ("g_emit", g_emit), ("g_out", g_out)):
        if sig is not None and sig.shape[0] != t_len:
            raise ValueError(
                f"{name} has {sig.shape[0]} steps, tape has {t_len}"
            )
    grads = zero_grads(params)
    if t_len == 0:
        return grads
    n_layers = len(params.layers)
    hid = params.hidden_size
    batch = tape.steps[0][0].uh.shape[1]
    dh_carry = [np.zeros((hid, batch)) for _ in range(n_layers)]
    dc_carry = [np.zeros((hid, batch)) for _ in range(n_layers)]
    emb_lo = tape.feature_dim + 1  # embedding slice of the step input
    emb_ids: List[np.ndarray] = []
    emb_vals: List[np.ndarray] = []

    for t in range(t_len - 1, -1, -1):
        recs = tape.steps[t]
        h_top = recs[-1].h
        dh_top = np.zeros((hid, batch))
        if g_h is not None:
            dh_top += g_h[t]
        if g_emit is not None:
            ge = g_emit[t][None, :]          # (1, B)
            grads["w_emit"] += ge @ h_top.T
            dh_top += params.w_emit.T @ ge
        if g_out is not None:
            go = g_out[t]                    # (V, B)
            grads["w_out"] += go @ h_top.T
            dh_top += params.w_out.T @ go

        d_above = dh_top
        for n in range(n_layers - 1, -1, -1):
            rec = recs[n]
            layer = params.layers[n]
            dh = dh_carry[n] + d_above
            dc = dc_carry[n] + dh * rec.o * (1.0 - rec.tc * rec.tc)
            do = dh * rec.tc
            di = dc * rec.g
            df = dc * rec.c_prev
            dg = dc * rec.i
            dc_carry[n] = dc * rec.f
            dz = np.empty((4 * hid, batch))
            dz[:hid] = di * rec.i * (1.0 - rec.i)
            dz[hid:2 * hid] = df * rec.f * (1.0 - rec.f)
            dz[2 * hid:3 * hid] = do * rec.o * (1.0 - rec.o)
            dz[3 * hid:] = dg * (1.0 - rec.g * rec.g)
            grads[f"layers.{n}.w_gates"] += dz @ rec.uh.T
            grads[f"layers.{n}.b_gates"] += dz.sum(axis=1)
            duh = layer.w_gates.T @ dz
            in_size = layer.input_size
            d_above = duh[:in_size]
            dh_carry[n] = duh[in_size:]
        # d_above is now the gradient on the assembled step input; only its
        # embedding slice reaches parameters (features and the emission bit
        # are data / sampled values, not differentiable inputs)
        emb_ids.append(tape.tokens[t])
        emb_vals.append(d_above[emb_lo:])

    ids = np.concatenate(emb_ids)
    vals = np.concatenate(emb_vals, axis=1).T  # (T*B, E)
    np.add.at(grads["embedding"], ids, vals)
    return grads


def replay_tape(params: ModelParams, tape: Tape) -> float:
    """Recompute every taped activation from its stored inputs; returns the
    maximum absolute discrepancy (0.0 when the tape is consistent)."""
    worst = 0.0
    for recs in tape.steps:
        for n, layer in enumerate(params.layers):
            rec = recs[n]
            z = layer.w_gates @ rec.uh + layer.b_gates[:, None]
            hid = layer.hidden_size
            act = sigmoid(z[:3 * hid])
            g = np.tanh(z[3 * hid:])
            c = act[hid:2 * hid] * rec.c_prev + act[:hid] * g
            tc = np.tanh(c)
            h = act[2 * hid:] * tc
            for got, want in ((act[:hid], rec.i), (act[hid:2 * hid], rec.f),
                              (act[2 * hid:], rec.o), (g, rec.g),
                              (tc, rec.tc), (h, rec.h)):
                worst = max(worst, float(np.abs(got - want).max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"NATC"
_CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(path, params: ModelParams,
                    extras: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Named float64 blocks: magic, version, then per block the name length,
    UTF-8 name, row/col counts, and a little-endian payload. Extra blocks
    (optimizer moments, step counters) ride along under their own names."""
    items = list(params.named_blocks())
    if extras:
        items.extend(sorted(extras.items()))
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        for name, arr in items:
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim == 0:
                a = a.reshape(1, 1)
            elif a.ndim == 1:
                a = a.reshape(1, -1)
            elif a.ndim != 2:
                raise ValueError(f"block {name!r} is not 2-D")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", a.shape[0], a.shape[1]))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[ModelParams, Dict[str, np.ndarray]]:
    """Returns (params, extras); extras holds any non-parameter blocks."""
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise CheckpointMagicError(
            f"{path}: bad magic {data[:4]!r}, expected {_CKPT_MAGIC!r}"
        )
    if len(data) < 8:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {_CKPT_VERSION}"
        )
    off = 8
    blocks: Dict[str, np.ndarray] = {}
    while off < len(data):
        try:
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            if len(data) < off + nlen:
                raise struct.error("name runs past EOF")
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            nbytes = rows * cols * 8
            if len(data) < off + nbytes:
                raise struct.error("payload runs past EOF")
            payload = np.frombuffer(data, dtype="<f8", count=rows * cols,
                                    offset=off).reshape(rows, cols)
            off += nbytes
        except struct.error:
            raise CheckpointTruncatedError(
                f"{path}: truncated at byte {off}"
            ) from None
        blocks[name] = payload.astype(np.float64)
    param_blocks = {k: v for k, v in blocks.items()
                    if not (k.startswith("adam.") or k.startswith("meta."))}
    extras = {k: v for k, v in blocks.items()
              if k.startswith("adam.") or k.startswith("meta.")}
    try:
        params = ModelParams.from_blocks(param_blocks)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return params, extras
