"""Self-contained verification battery for the estimator and its oracles.

Each check builds its own small random instances, compares an implementation
against an independent oracle (exhaustive enumeration, central finite
differences, brute-force edit scripts, binomial confidence bounds), and
returns a CheckResult. The battery powers both `nat check` and the heavier
acceptance tests, which call the same functions at bigger sample sizes.
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .estimator import (EstimatorConfig, exact_expected_reward,
                        exact_gradient, policy_gradient)
from .evaluation import levenshtein
from .network import ModelParams, init_params
from .numerics import Rng
from .optimizer import Schedules, schedule_value
from .transducer import (EpisodeInput, enumerate_trajectories, rollout,
                         sample_trajectory)

CORRUPT_ENV = "NAT_CORRUPT_GRADIENT"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def make_random_instance(seed: int, t1: int = 4, t2: Optional[int] = 2,
                         hidden: int = 4, layers: int = 1, vocab: int = 3,
                         feature_dim: int = 2, embed: int = 2,
                         scale: float = 0.6
                         ) -> Tuple[ModelParams, EpisodeInput]:
    """Small random model plus episode; scale well above the training init so
    emission probabilities spread away from 0.5."""
    rng = Rng(seed, 777)
    params = init_params(feature_dim, vocab, hidden, layers, embed,
                         rng.derive(1), init_scale=scale)
    if t2 is None:
        t2 = int(rng.derive(2).integers(1, t1 + 1))
    features = rng.derive(3).normal(size=(t1, feature_dim))
    if t2 > 1:
        body = rng.derive(4).integers(1, vocab, size=t2 - 1)
        targets = np.concatenate([body, [0]])
    else:
        targets = np.asarray([0])
    return params, EpisodeInput(features, targets)


# ---------------------------------------------------------------------------
# finite differences

def fd_gradient(f: Callable[[ModelParams], float], params: ModelParams,
                eps: float = 1e-5,
                components: Optional[Dict[str, np.ndarray]] = None
                ) -> Dict[str, np.ndarray]:
    """Central finite differences of a scalar objective, componentwise.

    components maps block name to an integer array of flat indices; None
    means every component of every block.
    """
    out = {}
    base = params.block_dict()
    for name, theta in base.items():
        idx = (np.arange(theta.size) if components is None
               else components.get(name, np.zeros(0, np.int64)))
        g = np.zeros(theta.size)
        for i in idx:
            bumped = {k: (v.copy() if k == name else v)
                      for k, v in base.items()}
            bumped[name].flat[i] = theta.flat[i] + eps
            hi = f(ModelParams.from_blocks(bumped))
            bumped[name].flat[i] = theta.flat[i] - eps
            lo = f(ModelParams.from_blocks(bumped))
            g[i] = (hi - lo) / (2.0 * eps)
        out[name] = g.reshape(theta.shape)
    return out


def max_rel_err(got: Dict[str, np.ndarray], want: Dict[str, np.ndarray],
                floor: float = 1e-7,
                components: Optional[Dict[str, np.ndarray]] = None,
                skip: Iterable[str] = ()) -> Tuple[float, str]:
    """max over compared components of |got-want| / max(|want|, floor)."""
    worst, where = 0.0, ""
    for name, w in want.items():
        if name in skip:
            continue
        g = got[name]
        idx = (np.arange(w.size) if components is None
               else components.get(name, np.zeros(0, np.int64)))
        for i in idx:
            err = abs(g.flat[i] - w.flat[i]) / max(abs(w.flat[i]), floor)
            if err > worst:
                worst, where = err, f"{name}[{i}]"
    return worst, where


# ---------------------------------------------------------------------------
# checks

def check_enumeration_normalization(n_models: int = 20, seed: int = 0,
                                    tol: float = 1e-10) -> CheckResult:
    """Enumerated trajectory probabilities must sum to 1 and come in
    C(T1, T2) many."""
    rng = Rng(seed, 31)
    worst = 0.0
    for j in range(n_models):
        t1 = int(rng.derive(j, 1).integers(3, 6))
        params, ep = make_random_instance(seed * 1000 + j, t1=t1, t2=None)
        trajs = enumerate_trajectories(params, ep)
        if len(trajs) != math.comb(ep.t1, ep.t2):
            return CheckResult(
                "enumeration_normalization", False,
                f"instance {j}: {len(trajs)} trajectories, expected "
                f"C({ep.t1},{ep.t2})={math.comb(ep.t1, ep.t2)}"
            )
        gap = abs(sum(p for _, p in trajs) - 1.0)
        worst = max(worst, gap)
    return CheckResult("enumeration_normalization", worst <= tol,
                       f"max |sum p - 1| = {worst:.3e} over {n_models} models")


def _sample_patterns(params: ModelParams, ep: EpisodeInput, n: int,
                     rng: Rng, chunk: int = 20000) -> Dict[tuple, int]:
    """n sampled emission patterns, batched through the shared rollout core."""
    counts: Dict[tuple, int] = {}
    done = 0
    part = 0
    while done < n:
        k = min(chunk, n - done)
        u = rng.derive(part).uniform(size=(ep.t1, k))
        batch = rollout(params, ep, k, uniforms=u)
        for col in batch.emissions.T:
            key = tuple(int(x) for x in col)
            counts[key] = counts.get(key, 0) + 1
        done += k
        part += 1
    return counts


def check_trajectory_law(n_instances: int = 5, n_samples: int = 100_000,
                         seed: int = 0, direct_samples: int = 2000
                         ) -> CheckResult:
    """Monte Carlo pattern frequencies vs enumerated probabilities, within 3
    binomial standard errors; every sampled pattern must be feasible. A slice
    of the samples goes through sample_trajectory one call at a time to tie
    the batched sampler to the public single-sample path."""
    for j in range(n_instances):
        params, ep = make_random_instance(seed * 100 + j, t1=4, t2=2)
        law = {tuple(int(x) for x in traj.emissions): p
               for traj, p in enumerate_trajectories(params, ep)}
        counts = _sample_patterns(params, ep, n_samples, Rng(seed, 51).derive(j))
        srng = Rng(seed, 52).derive(j)
        for _ in range(direct_samples):
            traj = sample_trajectory(params, ep, srng)
            key = tuple(int(x) for x in traj.emissions)
            counts[key] = counts.get(key, 0) + 1
        total = n_samples + direct_samples
        for key, c in counts.items():
            if key not in law:
                return CheckResult(
                    "trajectory_law", False,
                    f"instance {j}: sampled infeasible pattern {key}"
                )
        for key, p in law.items():
            freq = counts.get(key, 0) / total
            se = math.sqrt(max(p * (1.0 - p), 1e-12) / total)
            if abs(freq - p) > 3.0 * se:
                return CheckResult(
                    "trajectory_law", False,
                    f"instance {j}: pattern {key} freq {freq:.5f} vs prob "
                    f"{p:.5f} (3 SE = {3 * se:.5f})"
                )
    return CheckResult(
        "trajectory_law", True,
        f"{n_instances} instances x {n_samples + direct_samples} samples "
        "within 3 SE"
    )


def _forced_loglik(params: ModelParams, ep: EpisodeInput) -> float:
    """Total token log-likelihood of the (deterministic) all-forced rollout."""
    return float(rollout(params, ep, 1).token_logprobs.sum())


def _pick_components(params: ModelParams, per_block: int, seed: int,
                     skip: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    rng = Rng(seed, 61)
    out = {}
    for name, arr in params.named_blocks():
        if name in skip:
            continue
        take = min(per_block, arr.size)
        out[name] = np.sort(rng.derive(zlib.crc32(name.encode()))
                            .permutation(arr.size)[:take])
    return out


def check_supervised_fd(hidden: int = 8, layers: int = 2, t: int = 4,
                        seed: int = 0, eps: float = 1e-5,
                        rel_tol: float = 1e-4, floor: float = 1e-7,
                        max_fd_components: Optional[int] = None
                        ) -> CheckResult:
    """All-forced episode (T2 == T1): the estimator reduces to a supervised
    log-likelihood pass; its gradients must match central finite differences
    componentwise. max_fd_components caps the FD work per block (None checks
    every component). The wide init (scale 0.8) keeps every true gradient
    component above the finite-difference roundoff floor."""
    params, ep = make_random_instance(seed, t1=t, t2=t, hidden=hidden,
                                      layers=layers, scale=0.8)
    cfg = EstimatorConfig(k=1, baseline="none", entropy_weight=0.0)
    est = policy_gradient(params, ep, cfg, Rng(seed, 62))
    grads = est.blocks
    if os.environ.get(CORRUPT_ENV):
        grads = {k: v.copy() for k, v in grads.items()}
        grads["w_emit"].flat[0] += 1e-2  # test hook: fault injection
    comps = (None if max_fd_components is None
             else _pick_components(params, max_fd_components, seed,
                                   skip=("w_baseline", "b_baseline")))
    want = fd_gradient(lambda p: _forced_loglik(p, ep), params, eps=eps,
                       components=comps)
    worst, where = max_rel_err(grads, want, floor=floor, components=comps,
                               skip=("w_baseline", "b_baseline"))
    return CheckResult(
        "supervised_gradient_fd", worst <= rel_tol,
        f"max rel err {worst:.3e} at {where or 'n/a'} "
        f"(tol {rel_tol:g}, hidden {hidden}, layers {layers})"
    )


def check_exact_reward_fd(seed: int = 0, t1: int = 4, t2: int = 2,
                          entropy_weights: Sequence[float] = (0.0, 0.5),
                          modes: Sequence[str] = ("symmetric", "asymmetric"),
                          with_kl: bool = True, eps: float = 1e-5,
                          rel_tol: float = 1e-4, floor: float = 1e-7
                          ) -> CheckResult:
    """exact_gradient vs central finite differences of the enumerated E[R],
    across entropy weights and modes (and once with the KL rate pull)."""
    params, ep = make_random_instance(seed, t1=t1, t2=t2)
    combos = [EstimatorConfig(k=2, entropy_weight=w, entropy_mode=m)
              for w in entropy_weights for m in modes]
    if with_kl:
        combos.append(EstimatorConfig(k=2, entropy_weight=0.3,
                                      kl_target_rate=0.3, kl_weight=0.7))
    worst_all, where_all, tag = 0.0, "", ""
    for cfg in combos:
        got = exact_gradient(params, ep, cfg).blocks
        want = fd_gradient(lambda p: exact_expected_reward(p, ep, cfg),
                           params, eps=eps)
        worst, where = max_rel_err(got, want, floor=floor,
                                   skip=("w_baseline", "b_baseline"))
        if worst > worst_all:
            worst_all, where_all = worst, where
            tag = f"lambda={cfg.entropy_weight}, mode={cfg.entropy_mode}"
    return CheckResult(
        "exact_reward_fd", worst_all <= rel_tol,
        f"max rel err {worst_all:.3e} at {where_all} ({tag}; tol {rel_tol:g})"
    )


def check_unbiasedness(n_draws: int = 200_000, seed: int = 0,
                       baselines: Sequence[str] = ("none", "parametric",
                                                   "leave-one-out"),
                       ks: Sequence[int] = (2, 16), n_components: int = 20,
                       entropy_weight: float = 0.25,
                       se_mult: float = 3.0) -> CheckResult:
    """Monte Carlo mean of the sampled estimator vs the enumerated exact
    gradient, for every baseline and K: each selected model-parameter
    component must land within se_mult standard errors. Baseline head blocks
    are excluded (they follow their own regression objective, and E[R] does
    not depend on them).

    Draws run through the estimator's batched path in equal-size groups.
    Group means are iid, so the standard error of the overall mean comes
    from their spread (the batch-means method); group sizes are chosen to
    keep at least ~1000 groups per combination.
    """
    params, ep = make_random_instance(seed, t1=4, t2=2)
    exact = exact_gradient(
        params, ep, EstimatorConfig(k=2, entropy_weight=entropy_weight)
    ).blocks
    skip = ("w_baseline", "b_baseline")
    comps = _pick_components(params, max(2, n_components // 5), seed,
                             skip=skip)
    n_selected = sum(len(v) for v in comps.values())
    names = [n for n, _ in params.named_blocks() if n not in skip]
    for baseline in baselines:
        for k in ks:
            cfg = EstimatorConfig(k=k, baseline=baseline,
                                  entropy_weight=entropy_weight)
            rng = Rng(seed, 63).derive(zlib.crc32(baseline.encode()), k)
            d_batch = max(1, min(1024 // k, n_draws // 1000))
            n_batches = max(2, -(-n_draws // d_batch))
            s1 = {n: np.zeros(params.block_dict()[n].size) for n in names}
            s2 = {n: np.zeros(params.block_dict()[n].size) for n in names}
            for _ in range(n_batches):
                est = policy_gradient(params, ep, cfg, rng, draws=d_batch)
                for n in names:
                    flat = est.blocks[n].ravel()
                    s1[n] += flat
                    s2[n] += flat * flat
            for n in names:
                for i in comps[n]:
                    mean = s1[n][i] / n_batches
                    var = max(s2[n][i] / n_batches - mean * mean, 0.0)
                    var *= n_batches / (n_batches - 1)
                    se = math.sqrt(var / n_batches)
                    want = exact[n].flat[i]
                    if abs(mean - want) > se_mult * se + 1e-12:
                        return CheckResult(
                            "unbiasedness", False,
                            f"{baseline}, K={k}: component {n}[{i}] mean "
                            f"{mean:.6e} vs exact {want:.6e} "
                            f"(|diff| > {se_mult:g} SE = {se_mult * se:.2e})"
                        )
    return CheckResult(
        "unbiasedness", True,
        f"{n_selected} components within {se_mult:g} SE for "
        f"{len(baselines)} baselines x K in {tuple(ks)} "
        f"(>= {n_draws} draws each, batched)"
    )


def check_variance_reduction(n_instances: int = 10, n_draws: int = 800,
                             k: int = 16, seed: int = 0,
                             min_wins: int = 8) -> CheckResult:
    """Total gradient variance (summed over all components) of leave-one-out
    vs no baseline at the same K; the baseline must win on most instances."""
    wins = []
    for j in range(n_instances):
        params, ep = make_random_instance(seed * 10 + j, t1=5, t2=2)
        names = [n for n, _ in params.named_blocks()
                 if n not in ("w_baseline", "b_baseline")]
        totals = {}
        for baseline in ("none", "leave-one-out"):
            cfg = EstimatorConfig(k=k, baseline=baseline, entropy_weight=0.2)
            rng = Rng(seed, 64).derive(j, zlib.crc32(baseline.encode()))
            s1 = {n: 0.0 for n in names}
            s2 = {n: 0.0 for n in names}
            sq1 = {n: np.zeros(params.block_dict()[n].size) for n in names}
            sq2 = {n: np.zeros(params.block_dict()[n].size) for n in names}
            for _ in range(n_draws):
                est = policy_gradient(params, ep, cfg, rng)
                for n in names:
                    flat = est.blocks[n].ravel()
                    sq1[n] += flat
                    sq2[n] += flat * flat
            total = 0.0
            for n in names:
                mean = sq1[n] / n_draws
                total += float((sq2[n] / n_draws - mean * mean).sum())
            totals[baseline] = total
        wins.append(totals["leave-one-out"] < totals["none"])
    n_wins = sum(wins)
    return CheckResult(
        "variance_reduction", n_wins >= min_wins,
        f"leave-one-out beat no-baseline on {n_wins}/{n_instances} instances "
        f"(need >= {min_wins}; K={k}, {n_draws} draws)"
    )


def check_schedules() -> CheckResult:
    """Default schedule anchors, including the exact ramp midpoint."""
    s = Schedules()
    probes = [
        (s.entropy, 0, 1.0), (s.entropy, 10_000, 1.0),
        (s.entropy, 105_000, 0.55), (s.entropy, 200_000, 0.1),
        (s.entropy, 500_000, 0.1),
        (s.noise_std, 10_000, 0.0), (s.noise_std, 105_000, 0.075),
        (s.noise_std, 200_000, 0.15), (s.noise_std, 10 ** 9, 0.15),
    ]
    for sched, step, want in probes:
        got = schedule_value(sched, step)
        if abs(got - want) > 1e-12:
            return CheckResult(
                "schedules", False,
                f"value at step {step}: {got!r}, expected {want!r}"
            )
    if not (s.l2_weight == 0.001 and s.lr == 7e-5):
        return CheckResult("schedules", False,
                           f"defaults l2={s.l2_weight}, lr={s.lr}")
    ramp = [schedule_value(s.entropy, t) for t in range(9_000, 210_000, 1000)]
    if any(b > a + 1e-15 for a, b in zip(ramp, ramp[1:])):
        return CheckResult("schedules", False, "entropy ramp not monotone")
    return CheckResult("schedules", True,
                       "anchors exact, entropy ramp monotone")


def _naive_edit(a: Sequence[int], b: Sequence[int], i: int = 0,
                j: int = 0) -> int:
    """Exponential-time edit distance by exhaustive script search; the
    independent oracle for the DP implementation."""
    if i == len(a):
        return len(b) - j
    if j == len(b):
        return len(a) - i
    return min(_naive_edit(a, b, i + 1, j + 1) + (a[i] != b[j]),
               _naive_edit(a, b, i + 1, j) + 1,
               _naive_edit(a, b, i, j + 1) + 1)


def check_eval_oracle(n_pairs: int = 1000, max_len: int = 6, vocab: int = 3,
                      seed: int = 0) -> CheckResult:
    """DP edit distance vs brute force on random pairs, plus the S+I+D
    decomposition identity."""
    rng = Rng(seed, 65)
    for j in range(n_pairs):
        r = rng.derive(j)
        la = int(r.integers(0, max_len + 1))
        lb = int(r.integers(0, max_len + 1))
        a = [int(x) for x in r.integers(0, vocab, size=la)]
        b = [int(x) for x in r.integers(0, vocab, size=lb)]
        dist, s, ins, dl = levenshtein(a, b)
        want = _naive_edit(a, b)
        if dist != want:
            return CheckResult("eval_oracle", False,
                               f"pair {j}: {a} vs {b}: {dist} != {want}")
        if s + ins + dl != dist:
            return CheckResult(
                "eval_oracle", False,
                f"pair {j}: decomposition {s}+{ins}+{dl} != {dist}"
            )
    return CheckResult("eval_oracle", True,
                       f"{n_pairs} pairs match brute force exactly")


def run_all(seed: int = 0, fast: bool = True) -> List[CheckResult]:
    """The `nat check` battery; `fast` scales sample counts down to keep the
    command interactive while exercising every check."""
    draws = 20_000 if fast else 200_000
    law_samples = 20_000 if fast else 100_000
    pairs = 300 if fast else 1000
    return [
        check_enumeration_normalization(n_models=20, seed=seed),
        check_trajectory_law(n_instances=3, n_samples=law_samples, seed=seed),
        check_supervised_fd(seed=seed),
        check_exact_reward_fd(seed=seed),
        check_unbiasedness(n_draws=draws, seed=seed,
                           ks=(2, 16) if not fast else (16,)),
        check_variance_reduction(n_instances=5 if fast else 10,
                                 n_draws=300 if fast else 800, seed=seed,
                                 min_wins=4 if fast else 8),
        check_schedules(),
        check_eval_oracle(n_pairs=pairs, seed=seed),
    ]
