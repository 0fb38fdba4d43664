"""Tensor operations, layers, optimisers and gradient checking."""

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .functional import (
    add,
    batch_norm,
    composite_loss,
    conv,
    conv_transpose,
    cross_entropy,
    dice_loss,
    relu,
    softmax_channels,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import backward, make_optimizer, step
