"""
Test package for kspace_loupe
"""
