"""Deterministic federated learning simulation with FedKPer, FedAvg and FedProx."""

from .data import ClientDataset, Dataset
from .fl import ClientUpdate, Strategy, run_experiment
from .metrics import ForgettingSummary, consistency
from .nn import ModelParams

__all__ = [
    "ClientDataset",
    "ClientUpdate",
    "Dataset",
    "ForgettingSummary",
    "ModelParams",
    "Strategy",
    "consistency",
    "run_experiment",
]

__version__ = "0.1.0"
