"""Federated sequence-to-sequence load disaggregation on hourly smart-meter data."""

__version__ = "0.1.0"
