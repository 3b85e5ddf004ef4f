"""Toy vision-language model with token-reducing projectors on a numpy autodiff core."""

from .config import LMConfig, ModelConfig, ProjectorConfig, VisionConfig, full_size_config, toy_config
from .data import Corpus, SyntheticSpec, generate_corpus, load_corpus
from .model import VisionLanguageModel, exact_answer_accuracy, prepare
from .projector import Projector, merge_plan, param_count
from .tensor import Tensor
from .train import AdamW, PretrainConfig, StageConfig, run_two_stage

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Corpus",
    "LMConfig",
    "ModelConfig",
    "PretrainConfig",
    "Projector",
    "ProjectorConfig",
    "StageConfig",
    "SyntheticSpec",
    "Tensor",
    "VisionConfig",
    "VisionLanguageModel",
    "exact_answer_accuracy",
    "generate_corpus",
    "load_corpus",
    "merge_plan",
    "param_count",
    "full_size_config",
    "prepare",
    "run_two_stage",
    "toy_config",
]
