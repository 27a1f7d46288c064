"""Speculative decoding with a drafter that keeps training on its own serving traces."""

from .analytics import expected_accept_length, expected_speedup
from .config import ExperimentConfig, load_config
from .engine import greedy_decode, propose_tree, speculative_decode, verify_tree
from .errors import IntegrityError, SchemaError, SpecLoopError, StructureError, UsageError
from .orchestrator import run_experiment
from .toylm import init_draft, make_target

__all__ = [
    "ExperimentConfig", "IntegrityError", "SchemaError", "SpecLoopError", "StructureError", "UsageError",
    "expected_accept_length", "expected_speedup", "greedy_decode", "init_draft", "load_config",
    "make_target", "propose_tree", "run_experiment", "speculative_decode", "verify_tree",
]
__version__ = "0.1.0"
