"""
ulu_kit: the ULU activation family (fixed and learnable), a small
reverse-mode autodiff engine to train it on desk-scale classifiers, and the
experiments that measure it.
"""
__version__ = "0.1.0"

from .activations import (ActivationKind, ActivationSpec, AdaptiveParams, Parameterization, aulu_dx,
                          aulu_eval, aulu_grad_beta, batch_dx, batch_eval, convert_parameterization,
                          reference_dx, reference_eval, ulu_d2x, ulu_dx, ulu_eval)
from .errors import UluKitError

__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "AdaptiveParams",
    "Parameterization",
    "UluKitError",
    "aulu_dx",
    "aulu_eval",
    "aulu_grad_beta",
    "batch_dx",
    "batch_eval",
    "convert_parameterization",
    "reference_dx",
    "reference_eval",
    "ulu_d2x",
    "ulu_dx",
    "ulu_eval",
]
