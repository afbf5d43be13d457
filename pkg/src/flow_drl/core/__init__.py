"""
Numerical core for flow-drl: autodiff, parameters, optimizer, layers.

Copyright (c) 2026 flow-drl authors
"""

from .diffcore import (
    AdamState,
    CheckpointError,
    CompGraph,
    DomainError,
    Node,
    NonFiniteError,
    ParamSet,
    ShapeError,
    adam_step,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "CompGraph",
    "DomainError",
    "Node",
    "NonFiniteError",
    "ParamSet",
    "ShapeError",
    "adam_step",
]
