"""
levyfbsde: forward-backward SDEs driven by stable-like Poisson random measures, with
lent-particle Bismut-Elworthy-Li gradient weights and a 1D nonlocal PDE oracle.
"""
__version__ = '0.1.0'
