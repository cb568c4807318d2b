"""Thin-waveguide spectral toolkit.

Two straight planar tubes coupled through a small window, the solvable
point-interaction models they converge to, window capacity, and the study
drivers comparing the two sides.
"""

__version__ = "0.1.0"
