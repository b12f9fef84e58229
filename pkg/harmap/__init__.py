"""Spline parameterisation of planar multipatch domains by inversely harmonic maps"""
__version__ = "0.1.0"
