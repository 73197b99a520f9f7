"""Neural temporal opinion modelling: joint next-post time and stance
prediction from a user's history and their neighbours' recent posts,
trained end to end through a small reverse-mode differentiation engine,
plus a marked multivariate Hawkes simulator for synthetic data."""

from .autodiff import EXP_CLAMP, GradCheckError, Graph, GraphError, Tensor, grad_check
from .config import RunConfig, config_hash, load_run_config, rng_stream
from .data import EventSequence, Post, load_jsonl, transform_intervals
from .errors import EmptyResultError, InputError
from .model import Forecast, ModelState, build_graph, init_state, param_leaves
from .simulate import SimConfig, SimResult, write_dataset
from .simulate import simulate as run_simulation
from .tpp import QuadratureConfig, cumulative_intensity, density, expected_time, intensity
from .training import (Metrics, ablate, checkpoint_load, checkpoint_save, evaluate,
                       prepare, train)

__version__ = "0.1.0"

__all__ = [
    "EXP_CLAMP", "EmptyResultError", "EventSequence", "Forecast", "GradCheckError",
    "Graph", "GraphError", "InputError", "Metrics", "ModelState", "Post",
    "QuadratureConfig", "RunConfig", "SimConfig", "SimResult", "Tensor", "ablate",
    "build_graph", "checkpoint_load", "checkpoint_save", "config_hash",
    "cumulative_intensity", "density", "evaluate", "expected_time", "grad_check",
    "init_state", "intensity", "load_jsonl", "load_run_config", "param_leaves",
    "prepare", "rng_stream", "run_simulation", "train", "transform_intervals",
    "write_dataset", "__version__",
]
