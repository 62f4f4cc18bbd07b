"""Robustness-aware compression toolkit for small CNNs.

Trains an 8-layer CNN from scratch (numpy autodiff), compresses it by
l1-norm structured filter pruning or uniform quantization, fine-tunes
standardly or adversarially, and measures clean versus PGD-robust
accuracy.
"""

from .attack import AttackConfig, RobustnessReport, evaluate, pgd_attack, train_adversarial
from .data import BatchIterator, Dataset, load_idx, make_synthetic, subset
from .experiment import ExperimentConfig, RunReport, run_pipeline, sweep
from .nn import Model, build_small_cnn, load, save
from .prune import PrunePlan, apply_prune, filter_l1_norms, plan_prune
from .quant import QuantScheme, QuantizedModel, compute_scheme, dequantize, \
    fake_quant, ptq_calibrate, qat_epochs, quantize, quantized_forward
from .tensor import Tensor, conv2d, cross_entropy, linear, maxpool2d, relu
from .train import TrainConfig, finetune, lr_at, sgd_step, train_standard

__version__ = "0.1.0"
