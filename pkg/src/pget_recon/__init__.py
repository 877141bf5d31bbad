"""Reconstruction engine for passive gamma emission tomography.

Forward model, constrained trust-region solver, learned-operator
acceleration with a convergence safeguard, synthetic phantoms and the
training-batch pipeline.
"""

from . import accelerator, forward, geometry, phantom, safeguard, solver

__all__ = ["accelerator", "forward", "geometry", "phantom", "safeguard", "solver"]
__version__ = "0.1.0"
