"""Numerical laboratory for atomistic-to-continuum coupling energies.

Assembles atomistic and coupled energies on periodic lattices, detects ghost
forces, constructs discrete stress tensors and nonconforming correctors, and
certifies first-order consistency bounds numerically in 1D and 2D.
"""

__version__ = "0.1.0"

from .lattice import (
    LatticeDomain,
    LatticeError,
    PeriodicDeformation,
    PeriodicNodalField,
    Stencil,
    finite_difference,
    macroscopic_strain,
    stencil_differences,
)
from .potentials import (
    PairPotential1D,
    PairSitePotential,
    SitePotential,
    aggregate_lipschitz,
    cauchy_born_W,
    cauchy_born_dW,
)

__all__ = [
    "LatticeDomain",
    "LatticeError",
    "PeriodicDeformation",
    "PeriodicNodalField",
    "Stencil",
    "finite_difference",
    "macroscopic_strain",
    "stencil_differences",
    "SitePotential",
    "PairSitePotential",
    "PairPotential1D",
    "aggregate_lipschitz",
    "cauchy_born_W",
    "cauchy_born_dW",
]
