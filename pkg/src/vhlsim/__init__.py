"""Federated-learning simulator with virtual homogeneity learning (VHL).

Clients train on private Non-IID shards plus a shared class-conditional
noise dataset, with a supervised-contrastive pull of natural features
toward same-class virtual features. The ``analysis`` module checks the
margin/Wasserstein bound on exactly solvable instances.
"""

from .nn import MlpSpec, ModelParams, backward, cross_entropy, forward, supcon_loss
from .vhl import VhlConfig, calibration_penalty, vhl_step_loss

__all__ = [
    "MlpSpec",
    "ModelParams",
    "VhlConfig",
    "backward",
    "calibration_penalty",
    "cross_entropy",
    "forward",
    "supcon_loss",
    "vhl_step_loss",
]

__version__ = "0.1.0"
