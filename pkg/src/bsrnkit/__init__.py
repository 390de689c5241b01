"""Blueprint-separable super-resolution networks on a self-contained tensor core.

The package splits into a small stack: :mod:`bsrnkit.tensor` (NCHW kernels
with recorded gradients), :mod:`bsrnkit.autodiff` (reverse-mode walk and
finite-difference verification), :mod:`bsrnkit.blocks` (separable convs,
distillation blocks, attention), :mod:`bsrnkit.model` (assembly, presets,
checkpoints), :mod:`bsrnkit.complexity` (parameter/Multi-Adds accounting),
:mod:`bsrnkit.imaging` (bicubic + Y-channel PSNR/SSIM), plus training and
data/CLI plumbing.
"""

from .autodiff import Trace, backward, finite_diff_check, no_grad
from .blocks import AttentionMode, ConvKind
from .complexity import ComplexityReport, count_multi_adds, count_params, report
from .imaging import PlanarImage, bicubic_resize, psnr_y, rgb_to_y, ssim_y
from .model import ModelConfig, ModelState, build, forward, load_checkpoint, preset, save_checkpoint
from .tensor import ConvGeometry, ShapeError, Tensor
from .training import TrainConfig, adam_step, cosine_lr, l1_loss, train_loop

__version__ = "0.1.0"

__all__ = [
    "AttentionMode",
    "ComplexityReport",
    "ConvGeometry",
    "ConvKind",
    "ModelConfig",
    "ModelState",
    "PlanarImage",
    "ShapeError",
    "Tensor",
    "Trace",
    "TrainConfig",
    "adam_step",
    "backward",
    "bicubic_resize",
    "build",
    "cosine_lr",
    "count_multi_adds",
    "count_params",
    "finite_diff_check",
    "forward",
    "l1_loss",
    "load_checkpoint",
    "no_grad",
    "preset",
    "psnr_y",
    "report",
    "rgb_to_y",
    "save_checkpoint",
    "ssim_y",
    "train_loop",
]
