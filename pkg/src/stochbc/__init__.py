"""Discretized optimal Neumann boundary control of a stochastic heat equation.

P1 finite elements on the unit square, implicit Euler in time, additive
Q-Wiener noise on the boundary, and box-constrained adapted controls.
"""

__version__ = "0.1.0"

from .mesh import Mesh, MeshError, build_structured_mesh, refine
from .fem import DiscreteOperators, assemble
from .noise import NoiseEnsemble, NoiseSpec, ScenarioTree, build_tree, coarsen, sample_ensemble
from .evolution import ControlProcess, FeasibilityError, backward_S1, forward_G, forward_S0
from .condexp import ConditioningError, FeatureSpec, LSMCEstimator, MeanCE, TreeCE
from .optimizer import ControlProblem, SolveReport, cost, gradient, solve, vi_residual

__all__ = [
    "Mesh", "MeshError", "build_structured_mesh", "refine",
    "DiscreteOperators", "assemble",
    "NoiseEnsemble", "NoiseSpec", "ScenarioTree", "build_tree", "coarsen", "sample_ensemble",
    "ControlProcess", "FeasibilityError", "backward_S1", "forward_G", "forward_S0",
    "ConditioningError", "FeatureSpec", "LSMCEstimator", "MeanCE", "TreeCE",
    "ControlProblem", "SolveReport", "cost", "gradient", "solve", "vi_residual",
]
