"""Federated GCN simulator with cross-client membership and ownership attacks."""

__version__ = "0.1.0"
