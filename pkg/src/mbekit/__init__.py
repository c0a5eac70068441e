"""Desk-scale toolkit for entropy-gated language model training.

Core pieces: a float64 reverse-mode autodiff engine (mbekit.tensor),
differentiable matrix-based entropy and closed-form entropy bounds
(mbekit.entropy), the memorization/compression phase controller
(mbekit.controller), gradient-alignment diagnostics (mbekit.diagnostics),
two small model families (mbekit.nets), dataset generators (mbekit.data),
and the experiment harness (mbekit.training, mbekit.experiments) behind
the `mbekit` CLI.
"""

from .controller import GaptConfig, GaptState, PhaseDirective, gapt_step
from .entropy import MbeConfig, mbe, mbe_alpha2, shannon_entropy
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "GaptConfig",
    "GaptState",
    "PhaseDirective",
    "MbeConfig",
    "Tape",
    "Tensor",
    "backward",
    "gapt_step",
    "grad_check",
    "mbe",
    "mbe_alpha2",
    "shannon_entropy",
    "__version__",
]
