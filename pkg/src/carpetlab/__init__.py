"""Numerical laboratory for heat kernels, cutoff-Sobolev inequalities and
stochastic completeness on pre-Sierpinski carpet graphs."""

from .carpet import (BudgetExceeded, CarpetGraph, CarpetSpec, Graph, build_lattice, build_precarpet,
                     ball, vd_scan, volume_profile)
from .form import DirichletForm
from .scaling import ScalingFunction, phi, psi, psi_inv

__all__ = [
    "BudgetExceeded", "CarpetGraph", "CarpetSpec", "DirichletForm", "Graph", "ScalingFunction",
    "ball", "build_lattice", "build_precarpet", "phi", "psi", "psi_inv", "vd_scan", "volume_profile",
]
__version__ = "0.1.0"
