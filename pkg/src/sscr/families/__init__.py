"""Count families for zero-truncated population size models."""

from .base import CountFamily, available_families, get_family, poisson_glm, register_family, unregister_family
from .catalog import ChaoFamily, TruncatedCountFamily, ZeltermanFamily

__all__ = [
    "CountFamily",
    "TruncatedCountFamily",
    "ChaoFamily",
    "ZeltermanFamily",
    "available_families",
    "get_family",
    "poisson_glm",
    "register_family",
    "unregister_family",
]
