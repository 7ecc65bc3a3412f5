"""Accelerated quantitative cardiac MRI toolkit.

Simulates multi-coil undersampled k-space from synthetic relaxometry
phantoms, reconstructs baseline images with an unrolled variational
network guided by relaxation physics, and estimates T1/T2 parameter maps
with either a learned mapping network or a classical least-squares fit.
"""

__version__ = "0.1.0"
