"""
Test package for stagehide.
"""
