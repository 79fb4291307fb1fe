"""Rotation-normalized refinement of human pose score maps.

Submodules are imported on demand; ``import posenorm`` alone loads nothing
heavy, so the command line can cap BLAS threads before numpy starts.
"""

__version__ = "0.1.0"
