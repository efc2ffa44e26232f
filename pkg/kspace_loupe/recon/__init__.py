"""
Reconstruction methods: the unrolled network and the classical baselines.
"""

from ..types import KspaceLoupeError


class ReconstructionError(KspaceLoupeError):
    """Raised for invalid solver inputs (shapes, non-positive weights)"""
    pass
