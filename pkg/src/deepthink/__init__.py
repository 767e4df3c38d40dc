"""Weight-tied recurrent networks that think longer to solve harder mazes."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, grad_check
from .models import ModelSpec, build_model, count_parameters, effective_depth, forward_iterations
from .mazes import Dataset, build_dataset, generate_maze, solve_maze
from .training import TrainConfig, train
from .evaluation import ExitRule, evaluate, select_exit, sweep
from .analysis import activation_reuse, render_thoughts
from .records import ingest_classification

__all__ = [
    "Tape", "Tensor", "backward", "grad_check",
    "ModelSpec", "build_model", "count_parameters", "effective_depth", "forward_iterations",
    "Dataset", "build_dataset", "generate_maze", "solve_maze",
    "TrainConfig", "train",
    "ExitRule", "evaluate", "select_exit", "sweep",
    "activation_reuse", "render_thoughts",
    "ingest_classification",
]
