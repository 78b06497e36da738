"""Federated prototype learning with a dual-branch projector and
Fisher-guided personalized prototype fusion."""

__version__ = "0.1.0"
