"""nanonet: semi-supervised distillation of miniature encoder transformers.

Offline teacher-to-student knowledge distillation, dual-student mutual
learning, and bias-only fine-tuning on top of a small float64 autodiff
library with packed variable-length batches.
"""

from ._kernels import BACKEND as kernel_backend
from .tensor import Tensor, grad_check
from .encoder import (
    AttentionKind,
    EncoderConfig,
    EncoderModel,
    PackedBatch,
    forward,
    load_checkpoint,
    pack_sequences,
    save_checkpoint,
    tokenize,
)
from .distill import DistillConfig, LayerSelection, init_student, select_layers
from .cotrain import CotrainSettings, RunSpec, train_loop, train_supervised
from .peft import ParamPolicy, apply_policy, count_params, lr_schedule
from .harness import Corpus, RunConfig, evaluate, gen_toy_corpus, linear_cka, make_split

__version__ = "0.1.0"

__all__ = [
    "AttentionKind",
    "Corpus",
    "CotrainSettings",
    "DistillConfig",
    "EncoderConfig",
    "EncoderModel",
    "LayerSelection",
    "PackedBatch",
    "ParamPolicy",
    "RunConfig",
    "RunSpec",
    "Tensor",
    "apply_policy",
    "count_params",
    "evaluate",
    "forward",
    "gen_toy_corpus",
    "grad_check",
    "init_student",
    "kernel_backend",
    "linear_cka",
    "load_checkpoint",
    "lr_schedule",
    "make_split",
    "pack_sequences",
    "save_checkpoint",
    "select_layers",
    "tokenize",
    "train_loop",
    "train_supervised",
    "__version__",
]
