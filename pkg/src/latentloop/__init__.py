"""latentloop: iterative vision-language latent reasoning at desk scale.

A small from-scratch stack: a float64 autodiff engine, a toy vision encoder
and decoder LM, attention-driven visual token selection, an iterative gated
cross-modal fusion module producing chains of continuous thought vectors, a
diffusion-based latent reconstructor, contrastive/autoregressive training
objectives, a four-stage curriculum, and an analysis harness (probes,
trajectory PCA, attention statistics) with a CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, GradTape, no_grad
from .gradcheck import grad_check

__all__ = ["Tensor", "GradTape", "no_grad", "grad_check", "__version__"]
