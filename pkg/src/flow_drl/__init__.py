"""
flow-drl
Flow-policy soft actor-critic with a quantile-regression distributional critic

Copyright (c) 2026 flow-drl authors
"""

__version__ = "0.1.0"
__author__ = "flow-drl authors"

from .cli import main

__all__ = ["main", "__version__", "__author__"]
