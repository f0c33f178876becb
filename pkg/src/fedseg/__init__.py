"""Desk-scale federated segmentation: FCN from scratch, FedAvg over a framed wire protocol."""

__version__ = "0.1.0"
