"""
kspace-loupe - joint learning of k-space under-sampling patterns and an unrolled
multi-coil MRI reconstructor.
"""

__version__ = "0.1.0"
