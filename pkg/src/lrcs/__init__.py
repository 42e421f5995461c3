"""Low-rank regularized compressive sensing: a small autodiff engine, block
sampling, the unfolded reconstruction network, a model-based reference
solver and the tooling to train and evaluate it."""

from .tensor import Tensor, ShapeError, backward, grad_check, no_grad
from .sensing import (MeasurementOperator, Measurements, init_measurement,
                      init_reconstruction, orth_loss, ratio_to_m, sample)
from .network import ModelConfig, init_params, model_forward, named_parameters
from .classic import SolverHyper, low_rank_project, solve, svd_topk
from .imaging import load_gray, pad_to_block, psnr, ssim

__version__ = "0.1.0"
