"""Training dynamics of one-layer softmax attention on group-sparse classification."""

from .checkpoint import (
    BadMagicError, Checkpoint, CheckpointError, TruncatedCheckpointError, VersionMismatchError,
    load_checkpoint, save_checkpoint,
)
from .datagen import (
    Batch, DownstreamTask, GroupSparseTask, PositionalEncodingSet, Sample, antithetic_expand,
    make_positional_encodings, sample_downstream, sample_downstream_batch, sample_pretrain,
    sample_pretrain_batch, stream,
)
from .diagnostics import (
    ProjectionBasis, Sandwich, TheoryReport, alpha_decomposition, attention_concentration,
    first_step_oracle, growth_fit, sandwich_check, theory_report, w11_projection, w22_projection,
)
from .gradients import GradPair, fd_grad, grad_batch, grad_sample, population_grad_mc
from .model import (
    AttentionOutput, ModelParams, NumericalOverflowError, attention_matrix, forward,
    logistic_loss, loss_on_dataset, lprime,
)
from .training import (
    MetricsRow, TrainConfig, evaluate_accuracy, finetune_online_sgd, gd_step, train,
)

__version__ = "0.1.0"
