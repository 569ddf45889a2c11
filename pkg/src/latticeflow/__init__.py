"""Minimum-cost multicommodity flow with quadratic congestion cost on
disordered torus lattices, plus the constructive pipeline (boundary-walk
skeleton, patching, smoothing) and empirical estimators for the rescaled
limit cost.
"""

__version__ = "0.1.0"
