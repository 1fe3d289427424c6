"""Training loop: one utterance per step, epoch-shuffled, fully replayable.

Every random draw comes from a stream derived statelessly from the run seed
(per purpose, per step or epoch), so resuming from a checkpoint replays the
exact residual sequence the uninterrupted run would have used; together with
Adam moments stored inside the checkpoint this makes resume bit-identical.

Per step: apply scheduled Gaussian weight noise to a copy of the parameters,
estimate the policy gradient on one utterance with the noisy weights, then
update the clean parameters with Adam. Dev scoring uses clean weights and
deterministic greedy decoding.
"""

from __future__ import annotations

import csv
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, RunConfig, validate_for_train
from .data import Utterance, read_dataset, stack_utterance
from .estimator import policy_gradient
from .evaluation import score
from .network import (ModelParams, NumericError, apply_weight_noise,
                      init_params, load_checkpoint, save_checkpoint)
from .numerics import Rng
from .optimizer import AdamState, adam_step, init_adam, schedule_value
from .transducer import EpisodeInput, greedy_decode

log = logging.getLogger("nat.train")


class TrainingAbort(RuntimeError):
    """Training stopped on a numeric failure; the last good checkpoint (if
    any) is preserved and reported."""

    def __init__(self, message: str, last_checkpoint: Optional[Path]):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint

# stream tags; never reuse across purposes
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_NOISE = 2
_STREAM_SAMPLE = 3

_CKPT_RE = re.compile(r"^checkpoint_(\d{8})\.natc$")

METRICS_HEADER = ["step", "mean_reward", "dev_per", "entropy_weight",
                  "noise_std"]
DIAGNOSTICS_HEADER = ["step", "mean_reward", "score_variance",
                      "entropy_weight"]


@dataclass
class TrainResult:
    steps: int
    final_checkpoint: Path
    metrics_path: Path
    diagnostics_path: Path
    dev_error_rate: float


def load_episodes(path, stack: int, vocab: int
                  ) -> List[Tuple[Utterance, EpisodeInput]]:
    utts = read_dataset(path)
    out = []
    for utt in utts:
        stacked = stack_utterance(utt, stack)
        if int(stacked.targets.max()) >= vocab:
            raise ConfigError(
                f"utterance {utt.id!r} has token id {int(stacked.targets.max())} "
                f"outside model.vocab={vocab}"
            )
        try:
            ep = EpisodeInput(stacked.frames, stacked.targets)
        except ValueError as e:
            raise ConfigError(f"utterance {utt.id!r}: {e}") from None
        out.append((stacked, ep))
    return out


def dev_error_rate(params: ModelParams,
                   dev: Sequence[Tuple[Utterance, EpisodeInput]],
                   threads: int = 1) -> float:
    """Corpus token error rate under greedy decoding; the reduction is over
    the fixed dataset order, so thread count cannot change the result."""
    def decode(item):
        _, ep = item
        return greedy_decode(params, ep.features).tokens

    if threads > 1 and len(dev) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hyps = list(pool.map(decode, dev))
    else:
        hyps = [decode(item) for item in dev]
    refs = [ep.targets for _, ep in dev]
    return score(hyps, refs).error_rate


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"checkpoint_{step:08d}.natc"


def _prune_checkpoints(out_dir: Path, keep: int) -> None:
    found = []
    for p in out_dir.iterdir():
        m = _CKPT_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    if keep > 0:
        for _, p in sorted(found)[:-keep]:
            p.unlink()


def _adam_extras(adam: AdamState, step: int) -> dict:
    extras = {f"adam.m.{k}": v for k, v in adam.m.items()}
    extras.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    extras["meta.step"] = np.asarray([[float(step)]])
    return extras


def _restore_adam(params: ModelParams, extras: dict, lr: float,
                  beta1: float, beta2: float, eps: float
                  ) -> Tuple[AdamState, int]:
    step = int(extras["meta.step"][0, 0])
    adam = init_adam(params, lr, beta1, beta2, eps)
    adam.t = step
    for name in adam.m:
        m = extras.get(f"adam.m.{name}")
        v = extras.get(f"adam.v.{name}")
        if m is None or v is None:
            raise ConfigError(
                f"checkpoint lacks optimizer state for block {name!r}; "
                "cannot resume"
            )
        adam.m[name] = m.reshape(adam.m[name].shape).copy()
        adam.v[name] = v.reshape(adam.v[name].shape).copy()
    return adam, step


class _CsvSink:
    """Append-mode CSV writer; emits the header only on a fresh file. Floats
    are written with repr so files round-trip bit-exactly."""

    def __init__(self, path: Path, header: List[str]):
        self.path = path
        fresh = not path.exists() or path.stat().st_size == 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(header)
            self._fh.flush()

    def row(self, values) -> None:
        self._w.writerow([repr(v) if isinstance(v, float) else v
                          for v in values])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def train(cfg: RunConfig, out_dir, resume: Optional[str] = None,
          threads: int = 1) -> TrainResult:
    validate_for_train(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_eps = load_episodes(cfg.data.train, cfg.data.stack, cfg.model.vocab)
    dev_eps = load_episodes(cfg.data.dev, cfg.data.stack, cfg.model.vocab)
    if not train_eps:
        raise ConfigError("training dataset is empty")
    feat_dim = train_eps[0][1].features.shape[1]

    base = Rng(cfg.seed)
    sched = cfg.schedules
    opt = cfg.optimizer
    if resume is not None:
        params, extras = load_checkpoint(resume)
        if "meta.step" not in extras:
            raise ConfigError(
                f"checkpoint {resume} has no training state; cannot resume"
            )
        adam, start_step = _restore_adam(params, extras, sched.lr,
                                         opt.beta1, opt.beta2, opt.eps)
        if params.feature_dim != feat_dim:
            raise ConfigError(
                f"checkpoint expects feature dim {params.feature_dim}, "
                f"dataset has {feat_dim}"
            )
        log.info("resumed from %s at step %d", resume, start_step)
    else:
        params = init_params(feat_dim, cfg.model.vocab, cfg.model.hidden,
                             cfg.model.layers, cfg.model.embed,
                             base.derive(_STREAM_INIT),
                             init_scale=cfg.model.init_scale)
        adam = init_adam(params, sched.lr, opt.beta1, opt.beta2, opt.eps)
        start_step = 0

    metrics = _CsvSink(out_dir / "metrics.csv", METRICS_HEADER)
    diagnostics = _CsvSink(out_dir / "diagnostics.csv", DIAGNOSTICS_HEADER)

    n = len(train_eps)
    max_steps = cfg.train.max_steps
    order = None
    order_epoch = -1
    reward_acc = 0.0
    reward_n = 0
    last_dev = float("nan")
    final_ckpt = Path(resume) if resume is not None else None

    try:
        for step in range(start_step + 1, max_steps + 1):
            epoch = (step - 1) // n
            if epoch != order_epoch:
                order = base.derive(_STREAM_SHUFFLE, epoch).permutation(n)
                order_epoch = epoch
            _, episode = train_eps[int(order[(step - 1) % n])]

            lam = schedule_value(sched.entropy, step)
            noise_std = schedule_value(sched.noise_std, step)
            run_params = apply_weight_noise(params, noise_std,
                                            base.derive(_STREAM_NOISE, step))
            est_cfg = replace(cfg.estimator, entropy_weight=lam)
            est = policy_gradient(run_params, episode, est_cfg,
                                  base.derive(_STREAM_SAMPLE, step))
            params, adam = adam_step(params, adam, est.blocks,
                                     l2_weight=sched.l2_weight,
                                     clip_norm=opt.clip_norm)

            reward_acc += est.mean_reward
            reward_n += 1
            diagnostics.row([step, est.mean_reward, est.score_variance, lam])

            if step % cfg.train.eval_interval == 0 or step == max_steps:
                last_dev = dev_error_rate(params, dev_eps, threads)
                metrics.row([step, reward_acc / max(reward_n, 1), last_dev,
                             lam, noise_std])
                reward_acc = 0.0
                reward_n = 0
                log.info("step %d dev_per %.4f", step, last_dev)

            if step % cfg.train.checkpoint_interval == 0 or step == max_steps:
                final_ckpt = _checkpoint_path(out_dir, step)
                save_checkpoint(final_ckpt, params, _adam_extras(adam, step))
                _prune_checkpoints(out_dir, cfg.train.keep_checkpoints)
    except NumericError as e:
        # leave the last successfully written checkpoint in place
        raise TrainingAbort(
            f"numeric failure during training: {e}", final_ckpt
        ) from e
    finally:
        metrics.close()
        diagnostics.close()

    if start_step >= max_steps:
        # nothing to do; still report a dev score for visibility
        last_dev = dev_error_rate(params, dev_eps, threads)
        if final_ckpt is None:
            final_ckpt = _checkpoint_path(out_dir, start_step)
            save_checkpoint(final_ckpt, params,
                            _adam_extras(adam, start_step))
    return TrainResult(max(start_step, max_steps), final_ckpt,
                       out_dir / "metrics.csv", out_dir / "diagnostics.csv",
                       last_dev)
