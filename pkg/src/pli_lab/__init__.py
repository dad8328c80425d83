"""Federated-distillation privacy lab: FedMD-style protocols and paired-logits inversion."""

__version__ = "0.1.0"
