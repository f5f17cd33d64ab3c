"""
Dynamic rule miner - time-dependent rule mining over sensor windows.

A dynamic transformer encodes sliding windows of degradation sensors, a gated
recurrence turns attention context into rule states, and a learnable codebook
clusters those states into discrete rules of the form
``sensor predicates => remaining-useful-life band``.
"""

__version__ = "1.0.0"

from .config.settings import RunConfig, load_config
from .exceptions import RuleMinerError

__all__ = [
    "RuleMinerError",
    "RunConfig",
    "load_config",
    "__version__",
]
