"""Decentralized heterogeneous multi-player multi-armed bandits with collision sensing."""
from .sim import Distribution, Environment, Trace, UtilityMatrix, run_lockstep
from .rewards import make_reward

__version__ = "0.1.0"
__all__ = ["Distribution", "Environment", "Trace", "UtilityMatrix", "run_lockstep", "make_reward"]
