"""Tests for the Adam optimizer wrapper and piecewise-linear schedules."""

import numpy as np
import pytest

from nat.network import NumericError, init_params, zero_grads
from nat.numerics import Rng
from nat.optimizer import (
    AdamState,
    LinearSchedule,
    Schedules,
    adam_step,
    default_entropy_schedule,
    default_noise_schedule,
    init_adam,
    schedule_value,
)


def _params(seed=0):
    return init_params(feature_dim=2, vocab_size=3, hidden_size=3,
                       num_layers=1, embed_size=2, rng=Rng(seed, 50),
                       init_scale=0.5)


def _random_grads(params, seed):
    base = Rng(seed, 60)
    return {
        name: base.derive(i).normal(size=arr.shape)
        for i, (name, arr) in enumerate(params.named_blocks())
    }


def test_init_adam_state():
    params = _params()
    state = init_adam(params, lr=0.01)
    assert state.t == 0
    for name, arr in params.named_blocks():
        assert state.m[name].shape == arr.shape
        assert np.all(state.m[name] == 0.0)
        assert np.all(state.v[name] == 0.0)
    with pytest.raises(ValueError):
        init_adam(params, lr=0.0)
    with pytest.raises(ValueError):
        init_adam(params, lr=-1e-3)


def test_first_step_moves_by_lr_toward_ascent():
    """Bias correction makes the first step lr * g/(|g|+eps), i.e. about
    +lr in every component for a large positive ascent gradient."""
    params = _params(1)
    state = init_adam(params, lr=0.01)
    grads = {name: np.full_like(arr, 1000.0)
             for name, arr in params.named_blocks()}
    new_params, new_state = adam_step(params, state, grads)
    for name, arr in params.named_blocks():
        np.testing.assert_allclose(new_params.block_dict()[name] - arr,
                                   0.01, rtol=1e-6)
    assert new_state.t == 1
    # inputs are left untouched
    assert state.t == 0
    assert np.all(state.m["embedding"] == 0.0)
    grads = {name: np.full_like(arr, -1000.0)
             for name, arr in params.named_blocks()}
    new_params, _ = adam_step(params, state, grads)
    for name, arr in params.named_blocks():
        np.testing.assert_allclose(new_params.block_dict()[name] - arr,
                                   -0.01, rtol=1e-6)


def test_zero_gradient_is_identity_without_decay():
    params = _params(2)
    state = init_adam(params, lr=0.05)
    new_params, _ = adam_step(params, state, zero_grads(params))
    for name, arr in params.named_blocks():
        assert np.array_equal(new_params.block_dict()[name], arr)


def test_weight_decay_skips_biases():
    params = _params(3)
    state = init_adam(params, lr=0.001)
    new_params, _ = adam_step(params, state, zero_grads(params),
                              l2_weight=0.01)
    blocks, new_blocks = params.block_dict(), new_params.block_dict()
    assert np.array_equal(new_blocks["layers.0.b_gates"],
                          blocks["layers.0.b_gates"])
    assert np.array_equal(new_blocks["b_baseline"], blocks["b_baseline"])
    for name in ("layers.0.w_gates", "embedding", "w_emit", "w_out",
                 "w_baseline"):
        assert not np.array_equal(new_blocks[name], blocks[name])
        # decay pushes weights toward zero on the first step
        moved = new_blocks[name] - blocks[name]
        big = np.abs(blocks[name]) > 1e-3
        assert np.all(np.sign(moved[big]) == -np.sign(blocks[name][big]))


def test_clip_norm_equals_global_rescale():
    params = _params(4)
    state = init_adam(params, lr=0.01)
    grads = zero_grads(params)
    grads["w_emit"][0, 0] = 3.0  # global gradient norm is exactly 3
    clipped, _ = adam_step(params, state, grads, clip_norm=1.5)
    scaled = {name: 0.5 * g for name, g in grads.items()}
    manual, _ = adam_step(params, state, scaled)
    for name in grads:
        assert np.array_equal(clipped.block_dict()[name],
                              manual.block_dict()[name])
    # below the threshold the clip is a no-op
    loose, _ = adam_step(params, state, grads, clip_norm=10.0)
    plain, _ = adam_step(params, state, grads)
    for name in grads:
        assert np.array_equal(loose.block_dict()[name],
                              plain.block_dict()[name])


def test_adam_matches_reference_equations():
    """Three steps against an independently written textbook Adam update."""
    params = _params(5)
    lr, b1, b2, eps = 0.02, 0.9, 0.999, 1e-8
    state = init_adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
    ref = {name: arr.copy() for name, arr in params.named_blocks()}
    m = {name: np.zeros_like(a) for name, a in ref.items()}
    v = {name: np.zeros_like(a) for name, a in ref.items()}
    for t in range(1, 4):
        grads = _random_grads(params, seed=t)
        params, state = adam_step(params, state, grads)
        for name in ref:
            d = -grads[name]
            m[name] = b1 * m[name] + (1 - b1) * d
            v[name] = b2 * v[name] + (1 - b2) * d * d
            m_hat = m[name] / (1 - b1 ** t)
            v_hat = v[name] / (1 - b2 ** t)
            ref[name] = ref[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    for name, want in ref.items():
        np.testing.assert_allclose(params.block_dict()[name], want,
                                   rtol=1e-13, atol=1e-15)


def test_gradient_block_mismatch_rejected():
    params = _params(6)
    state = init_adam(params, lr=0.01)
    grads = zero_grads(params)
    del grads["w_out"]
    with pytest.raises(ValueError, match="w_out"):
        adam_step(params, state, grads)
    grads = zero_grads(params)
    grads["mystery"] = np.zeros(3)
    with pytest.raises(ValueError, match="mystery"):
        adam_step(params, state, grads)


def test_non_finite_gradient_rejected():
    params = _params(7)
    state = init_adam(params, lr=0.01)
    grads = zero_grads(params)
    grads["w_emit"][0, 1] = np.nan
    with pytest.raises(NumericError):
        adam_step(params, state, grads)
    grads["w_emit"][0, 1] = np.inf
    with pytest.raises(NumericError):
        adam_step(params, state, grads)


def test_update_sequence_is_deterministic():
    finals = []
    for _ in range(2):
        params = _params(8)
        state = init_adam(params, lr=0.01)
        for t in range(50):
            params, state = adam_step(params, state,
                                      _random_grads(params, seed=100 + t),
                                      l2_weight=1e-4)
        finals.append({n: a.tobytes() for n, a in params.named_blocks()})
    assert finals[0] == finals[1]


# ---------------------------------------------------------------------------
# schedules

def test_entropy_schedule_anchor_values():
    sched = default_entropy_schedule()
    assert schedule_value(sched, 0) == 1.0
    assert schedule_value(sched, 10_000) == 1.0
    assert schedule_value(sched, 105_000) == pytest.approx(0.55)
    assert schedule_value(sched, 200_000) == 0.1
    assert schedule_value(sched, 1_000_000) == 0.1


def test_noise_schedule_anchor_values():
    sched = default_noise_schedule()
    assert schedule_value(sched, 0) == 0.0
    assert schedule_value(sched, 10_000) == 0.0
    assert schedule_value(sched, 105_000) == pytest.approx(0.075)
    assert schedule_value(sched, 200_000) == 0.15
    assert schedule_value(sched, 500_000) == 0.15


def test_schedule_ramp_is_monotone():
    sched = LinearSchedule(2.0, 0.5, 100, 600)
    values = [schedule_value(sched, s) for s in range(0, 700, 7)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    up = LinearSchedule(0.0, 1.0, 100, 600)
    values = [schedule_value(up, s) for s in range(0, 700, 7)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        LinearSchedule(1.0, 0.0, 500, 500)
    with pytest.raises(ValueError):
        LinearSchedule(1.0, 0.0, 500, 400)


def test_schedules_defaults():
    bundle = Schedules()
    assert bundle.entropy.start == 1.0
    assert bundle.noise_std.end == 0.15
    assert bundle.l2_weight == pytest.approx(0.001)
    assert bundle.lr == pytest.approx(7e-5)
