"""
Tests package for the lazy random walk toolkit.
"""
