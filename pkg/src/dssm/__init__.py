"""Deep state-space hazard models for correlated time-to-event prediction.

A small reverse-mode autodiff core drives a variational state-space model:
a bidirectional LSTM encoder infers latent physiology from irregular
observations and interventions, a Markov transition rolls the state forward,
and one discrete-time hazard head per event type reads risk off the state.
"""

from .data import EventRecord, Trajectory, make_batch, read_cohort, write_cohort
from .ssm import CohortSchema
from .survival import HazardTrajectory, survival_from_hazard
from .trainer import TrainConfig, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CohortSchema",
    "EventRecord",
    "HazardTrajectory",
    "TrainConfig",
    "Trajectory",
    "load_checkpoint",
    "make_batch",
    "predict",
    "read_cohort",
    "save_checkpoint",
    "survival_from_hazard",
    "train",
    "write_cohort",
]
