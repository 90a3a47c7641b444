"""Saliency-aware quantized imitation learning on desk-scale control tasks.

Subpackages by capability:

- nn: MLP policies, hand-written gradients, Adam.
- quant: uniform symmetric quantizer, RTN calibration, STE/LSQ fake-quant.
- envs: PickPlace and Lane toy environments, experts, dataset generation.
- saliency: perturbation saliency, SIS tables, flagging thresholds.
- training: behavior cloning and the quantization-robust loss family.
- evaluation: rollouts, success rates, discrepancy and divergence metrics.
- qkernels: bit-packed integer inference kernels and benchmarks.
- formats: binary artifact files (checkpoints, datasets, SIS caches, models).
- cli: subcommand front end over all of the above.
"""

from . import envs, evaluation, formats, nn, qkernels, quant, saliency, training
from .errors import NumericError, UsageError

__all__ = [
    "NumericError",
    "UsageError",
    "envs",
    "evaluation",
    "formats",
    "nn",
    "qkernels",
    "quant",
    "saliency",
    "training",
]

__version__ = "0.1.0"
