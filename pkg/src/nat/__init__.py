"""Online neural transducer: emit-or-wait sequence transduction trained with
multi-sample policy gradients."""

from .data import EOS_ID, SyntheticTaskSpec, Utterance, gen_synthetic
from .estimator import (EstimatorConfig, GradEstimate, exact_gradient,
                        policy_gradient, step_rewards)
from .network import (ModelParams, init_params, load_checkpoint,
                      save_checkpoint)
from .numerics import Rng
from .optimizer import AdamState, LinearSchedule, Schedules, adam_step
from .transducer import (EpisodeInput, Hypothesis, Trajectory,
                         enumerate_trajectories, greedy_decode,
                         sample_trajectory)

__version__ = "0.1.0"

__all__ = [
    "EOS_ID", "SyntheticTaskSpec", "Utterance", "gen_synthetic",
    "EstimatorConfig", "GradEstimate", "exact_gradient", "policy_gradient",
    "step_rewards", "ModelParams", "init_params", "load_checkpoint",
    "save_checkpoint", "Rng", "AdamState", "LinearSchedule", "Schedules",
    "adam_step", "EpisodeInput", "Hypothesis", "Trajectory",
    "enumerate_trajectories", "greedy_decode", "sample_trajectory",
    "__version__",
]
