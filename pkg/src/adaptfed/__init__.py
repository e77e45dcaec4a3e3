"""Deterministic NumPy simulation of federated focal-modulation models with a client-conditioned generator."""

from .datagen import SyntheticTaskSpec, make_synthetic
from .federation import RoundConfig, ServerState, adapt_new_client, init_server, run_experiment, run_round
from .model import Arch, ModelParams
from .numcore import ConfigurationError, NonFiniteError, ProtocolError, make_rng

__version__ = "0.1.0"

__all__ = [
    "Arch", "ConfigurationError", "ModelParams", "NonFiniteError", "ProtocolError", "RoundConfig",
    "ServerState", "SyntheticTaskSpec", "adapt_new_client", "init_server", "make_rng", "make_synthetic",
    "run_experiment", "run_round",
]
