"""Prompt-based continual learning for toy video question answering.

A frozen miniature transformer with learnable visual projection, prompts and
task embeddings, trained task by task on a synthetic multimodal stream.
"""

from .autodiff import Tape, Tensor, apply, backward, grad_check
from .evaluation import avg_final_accuracy, avg_forgetting, export_embeddings, silhouette
from .losses import LossFlags, total_loss
from .model import ModelConfig, ModelParams, build_model, forward_pass, score_candidates
from .synthdata import TaskSpec, TaskStream, default_specs, generate_task_stream, load_jsonl
from .trainer import TrainConfig, train_continual, warm_fit_backbone

__version__ = "0.1.0"
