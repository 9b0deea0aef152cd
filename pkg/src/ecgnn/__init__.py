"""Event-correlated graph networks for video question answering, on a small numpy autodiff core."""
from .data import Dataset, Sample
from .datagen import gen_choice_task, gen_count_task, gen_word_task, load_dataset, save_dataset
from .estimator import EventGraphQA
from .numkit import ConfigError, ContractError, Param, ShapeError, Tensor, backward, grad_check
from .pipeline import Model, ModelConfig, TrainConfig, evaluate, fit, forward, predict
from .tensorfile import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "Dataset", "EventGraphQA", "Model", "ModelConfig", "Param", "Sample",
    "ShapeError", "Tensor", "TrainConfig", "backward", "evaluate", "fit", "forward", "gen_choice_task",
    "gen_count_task", "gen_word_task", "grad_check", "load_dataset", "predict", "read_tensor", "save_dataset",
    "write_tensor",
]
