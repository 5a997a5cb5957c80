"""Normalizing flows with latent-space perturbations for classifier training."""
from .attacks import PerturbationSpec, adversarial_la, pgd_image, randomized_la
from .flow import FlowModel, build_flow

__version__ = "0.1.0"

__all__ = ["FlowModel", "PerturbationSpec", "adversarial_la", "build_flow", "pgd_image",
           "randomized_la"]
