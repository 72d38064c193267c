"""Backbone decomposition sampler for supercritical continuous-state branching processes."""

from .mechanism import BranchingMechanism, MechanismError, MechanismProfile, classify

__version__ = "0.1.0"

__all__ = ["BranchingMechanism", "MechanismError", "MechanismProfile", "classify", "__version__"]
