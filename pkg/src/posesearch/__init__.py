"""Pose-aware shape retrieval by rendering point features and comparing them
with a query feature map."""

__version__ = "0.1.0"
