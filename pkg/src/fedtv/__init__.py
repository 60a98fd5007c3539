"""Federated fine-tuning simulator with personalized task-vector aggregation."""

__version__ = "0.1.0"
