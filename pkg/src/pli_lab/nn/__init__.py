"""Minimal deterministic NumPy neural-network engine."""

from pli_lab.nn.functional import (
    cross_entropy,
    entropy,
    kl_distill,
    kl_distill_logits,
    l1_distill,
    l2,
    log_softmax,
    soft_cross_entropy,
    softmax_backward,
    softmax_tau,
)
from pli_lab.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    Identity,
    Layer,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    Tanh,
)
from pli_lab.nn.network import Network, classifier_net, inversion_net
from pli_lab.nn.optim import Adam, AdamState, adam_for

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "ConvTranspose2d", "Flatten", "Identity",
    "Layer", "Linear", "MaxPool2d", "Network", "Parameter", "ReLU", "Tanh", "adam_for",
    "classifier_net", "cross_entropy", "entropy", "inversion_net", "kl_distill",
    "kl_distill_logits", "l1_distill", "l2", "log_softmax", "soft_cross_entropy",
    "softmax_backward", "softmax_tau",
]
