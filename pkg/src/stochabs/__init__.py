"""Finite abstractions of stochastic processes with certified error bounds."""
from .abstraction import AbstractModel, LabelDef, assign_labels, build_mc, build_mdp
from .config import ConfigError, ProblemSpec, parse_config
from .gridding import ErrorCertificate, adaptive_refine, delta_for_error, uniform_error_bound
from .model import Box, LinearGaussian, Model, NonlinearGaussian, UserDensity
from .partition import Partition, locate_state, uniform_partition
from .verification import reach_avoid_dp_mc, reach_avoid_dp_mdp, safety_dp_mc, safety_dp_mdp

__version__ = "0.1.0"
