"""Average-cost PPO control of multiclass queueing networks with exact DP oracles."""

__version__ = "0.1.0"

from . import dp, estimators, evaluate, networks, nn, policies, ppo, simulate  # noqa: F401
from .mdp import NModel, QueueNetworkModel, StepMode, TabularModel, make_model  # noqa: F401
from .networks import NetworkSpec, NModelSpec, load_network  # noqa: F401
