"""Federated distillation protocols (FedMD, FedGEMS, DS-FL) and FedAVG."""

from pli_lab.federation.artifacts import read_registry_csv, save_round, write_registry_csv
from pli_lab.federation.protocols import (
    SCHEMES,
    Federation,
    FederationState,
    GradientView,
    ProtocolConfig,
    ServerView,
    average_weights,
    era,
)

__all__ = [
    "SCHEMES", "Federation", "FederationState", "GradientView", "ProtocolConfig", "ServerView",
    "average_weights", "era", "read_registry_csv", "save_round", "write_registry_csv",
]
