"""Periodic lattice domains, nodal fields, and finite-difference operators.

The computational cell is the scaled torus (-1, 1]^d with lattice spacing
eps = 1/N.  Sites are stored by integer index and wrapped into the window
{-N+1, ..., N}^d; coordinates are materialized as eps * index on demand, so
eps * N = 1 holds exactly in the representation.

Deformations are stored as (A, u) pairs: a macroscopic strain matrix A plus
a periodic nodal displacement u.  This makes membership in the affine space
of deformations with prescribed strain structural, and homogeneous states
exact in floating point.

All types are immutable after construction and all operations are pure, so
concurrent read access from multiple threads is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LatticeError(ValueError):
    """Invalid lattice input (bad offset, non-deformation data, ...)."""


def roll_get(values, offset, naxes=None):
    """Return array w with w[s] = values[s + offset], wrapping periodically.

    ``offset`` is an integer vector applied to the leading ``naxes`` axes
    (defaults to len(offset)).
    """
    offset = np.atleast_1d(np.asarray(offset, dtype=int))
    if naxes is None:
        naxes = len(offset)
    return np.roll(values, shift=tuple(-int(o) for o in offset),
                   axis=tuple(range(naxes)))


@dataclass(frozen=True)
class LatticeDomain:
    """Periodic reference cell: the index box {-N+1,...,N}^d scaled by eps=1/N."""

    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise LatticeError(f"dimension must be 1 or 2, got {self.d}")
        if self.N < 2:
            raise LatticeError(f"N must be >= 2, got {self.N}")

    @property
    def eps(self):
        return 1.0 / self.N

    @property
    def n_side(self):
        return 2 * self.N

    @property
    def shape(self):
        return (self.n_side,) * self.d

    @property
    def num_sites(self):
        return self.n_side ** self.d

    @property
    def volume(self):
        """|Omega| = 2^d."""
        return float(2 ** self.d)

    def axis_indexes(self):
        """Integer site index i for each storage slot s along one axis."""
        s = np.arange(self.n_side)
        return ((s + self.N - 1) % self.n_side) - self.N + 1

    def index_grid(self):
        """(shape, d) array of integer site indices (window representatives)."""
        ax = self.axis_indexes()
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)

    def coords(self):
        """(shape, d) array of site coordinates eps * index."""
        return self.eps * self.index_grid()

    def slot(self, i):
        """Storage slot tuple for an integer index vector (wraps periodically)."""
        i = np.asarray(i, dtype=int)
        return tuple(np.mod(i, self.n_side))

    def wrap_index(self, i):
        """Wrap an integer index vector into the window {-N+1,...,N}^d."""
        i = np.asarray(i, dtype=int)
        return ((i + self.N - 1) % self.n_side) - self.N + 1


@dataclass(frozen=True)
class Stencil:
    """Finite interaction range: a set of distinct nonzero integer offsets.

    Offsets are stored in canonical lexicographic order; every tuple of
    per-offset quantities produced by this package follows that order.
    """

    offsets: tuple

    def __post_init__(self):
        offs = tuple(tuple(int(c) for c in r) for r in self.offsets)
        if any(all(c == 0 for c in r) for r in offs):
            raise LatticeError("stencil must not contain the zero offset")
        if len(set(offs)) != len(offs):
            raise LatticeError("stencil offsets must be distinct")
        object.__setattr__(self, "offsets", tuple(sorted(offs)))

    @property
    def m(self):
        return len(self.offsets)

    @property
    def d(self):
        return len(self.offsets[0])

    @property
    def array(self):
        return np.asarray(self.offsets, dtype=int)

    @property
    def norms(self):
        """Euclidean lengths |r| in lexicographic offset order."""
        return np.linalg.norm(self.array, axis=1)

    @property
    def max_reach(self):
        return int(np.max(np.abs(self.array)))

    @property
    def is_symmetric(self):
        offs = set(self.offsets)
        return all(tuple(-c for c in r) in offs for r in offs)

    def index(self, r):
        r = tuple(int(c) for c in np.atleast_1d(r))
        return self.offsets.index(r)


def nearest_neighbor_stencil(d):
    if d == 1:
        return Stencil(((-1,), (1,)))
    return Stencil(((1, 0), (-1, 0), (0, 1), (0, -1)))


def nn_and_diagonal_stencil():
    """Nearest plus diagonal neighbors on the square lattice."""
    return Stencil(((1, 0), (-1, 0), (0, 1), (0, -1),
                    (1, 1), (-1, -1), (1, -1), (-1, 1)))


def second_neighbor_stencil(d):
    if d == 1:
        return Stencil(((-2,), (-1,), (1,), (2,)))
    return Stencil(((1, 0), (-1, 0), (0, 1), (0, -1),
                    (2, 0), (-2, 0), (0, 2), (0, -2)))


@dataclass(frozen=True)
class PeriodicNodalField:
    """Nodal values of a periodic map from the lattice to R^k.

    ``values`` has shape domain.shape + (k,).  Evaluation at any integer
    index wraps into the stored window, which realizes 2Z^d periodicity.
    """

    domain: LatticeDomain
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == self.domain.d:
            v = v[..., None]
        if v.shape[:-1] != self.domain.shape:
            raise LatticeError(
                f"values shape {v.shape} does not match domain {self.domain.shape}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, domain, k=1):
        return cls(domain, np.zeros(domain.shape + (k,)))

    @property
    def k(self):
        return self.values.shape[-1]

    def at(self, i):
        """Value at integer index i (wrapped)."""
        return self.values[self.domain.slot(i)]

    def shift(self, r):
        """Array of values at s + r."""
        return roll_get(self.values, r, naxes=self.domain.d)

    def diff(self, r):
        """Finite difference array D_r u over all sites."""
        return (self.shift(r) - self.values) / self.domain.eps

    def mean(self):
        return self.values.reshape(-1, self.k).mean(axis=0)

    def add_scaled(self, other, t):
        return PeriodicNodalField(self.domain, self.values + t * other.values)


@dataclass(frozen=True)
class PeriodicDeformation:
    """Deformation y(x) = A x + u(x) with periodic displacement part u."""

    A: np.ndarray
    u: PeriodicNodalField

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(self.domain.d, self.domain.d)
        A = A.copy()
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if self.u.k != self.domain.d:
            raise LatticeError("displacement component count must equal dimension")

    @property
    def domain(self):
        return self.u.domain

    @classmethod
    def from_strain(cls, domain, A):
        return cls(np.asarray(A, dtype=float),
                   PeriodicNodalField.zeros(domain, domain.d))

    @classmethod
    def homogeneous(cls, domain, A):
        return cls.from_strain(domain, A)

    def values(self):
        """Nodal values A x + u on the stored window representative."""
        return self.domain.coords() @ self.A.T + self.u.values

    def eval_at(self, i):
        """Evaluate at an (unwrapped) integer index vector or batch thereof.

        The affine part uses the unwrapped coordinate, the displacement part
        wraps; this is the periodic extension of the stored representative.
        """
        i = np.asarray(i, dtype=int)
        x = self.domain.eps * i
        if i.ndim == 1:
            return x @ self.A.T + self.u.at(i)
        uvals = np.stack([self.u.at(ii) for ii in i])
        return x @ self.A.T + uvals

    def diff(self, r):
        """Array of D_r y over all sites: A r + D_r u (exact for u == 0)."""
        r = np.asarray(r, dtype=int)
        return self.A @ r.astype(float) + self.u.diff(r)

    def stencil_diffs(self, stencil):
        """(shape, m, d) array of stencil differences in canonical offset order."""
        return np.stack([self.diff(r) for r in stencil.offsets],
                        axis=self.domain.d)

    def add_scaled(self, z, t):
        """y + t z for a deformation or displacement-field direction z."""
        if isinstance(z, PeriodicDeformation):
            return PeriodicDeformation(self.A + t * z.A, self.u.add_scaled(z.u, t))
        return PeriodicDeformation(self.A, self.u.add_scaled(z, t))


def finite_difference(v, x, r):
    """Pointwise finite difference (v(x + eps r) - v(x)) / eps.

    ``v`` may be a PeriodicNodalField or a PeriodicDeformation; ``x`` is an
    integer site index and ``r`` a nonzero integer offset.
    """
    r = np.atleast_1d(np.asarray(r, dtype=int))
    if not r.any():
        raise LatticeError("finite difference offset must be nonzero")
    x = np.atleast_1d(np.asarray(x, dtype=int))
    if isinstance(v, PeriodicDeformation):
        # split off the affine part so homogeneous states are exact
        du = (v.u.at(x + r) - v.u.at(x)) / v.domain.eps
        return v.A @ r.astype(float) + du
    return (v.at(x + r) - v.at(x)) / v.domain.eps


def stencil_differences(y, x, stencil):
    """Tuple (D_r y(x))_{r in stencil}, ordered canonically."""
    return np.stack([finite_difference(y, x, r) for r in stencil.offsets])


def macroscopic_strain(y, n_samples=8, tol=1e-10, rng=None):
    """Extract the strain A with A e_j = (y(x + 2 e_j) - y(x)) / 2.

    The difference is evaluated for a sample of sites x; inconsistency across
    samples beyond ``tol`` signals that the input is not a deformation.
    """
    dom = y.domain
    if rng is None:
        rng = np.random.default_rng(0)
    xs = rng.integers(-dom.N + 1, dom.N + 1, size=(n_samples, dom.d))
    cols = []
    for j in range(dom.d):
        ej = np.zeros(dom.d, dtype=int)
        ej[j] = dom.n_side  # +2 e_j in coordinates is +2N in index units
        vals = (y.eval_at(xs + ej) - y.eval_at(xs)) / 2.0
        spread = np.max(np.abs(vals - vals[0]))
        scale = 1.0 + np.max(np.abs(vals))
        if spread > tol * scale:
            raise LatticeError(
                f"strain extraction inconsistent across sites (spread {spread:.3e}); "
                "input is not a periodic deformation")
        cols.append(vals.mean(axis=0))
    return np.stack(cols, axis=1)


def deformation_from_point_map(domain, fn, n_samples=8, tol=1e-10):
    """Build a deformation from raw point evaluations on the integer lattice.

    ``fn`` maps an (n, d) array of (unwrapped) integer indices to (n, d)
    deformed positions.  The strain is recovered from period-2 differences
    and the periodic displacement is what remains on the window.
    """
    rng = np.random.default_rng(1)
    xs = rng.integers(-domain.N + 1, domain.N + 1, size=(n_samples, domain.d))
    cols = []
    for j in range(domain.d):
        ej = np.zeros(domain.d, dtype=int)
        ej[j] = domain.n_side
        vals = (np.asarray(fn(xs + ej)) - np.asarray(fn(xs))) / 2.0
        spread = np.max(np.abs(vals - vals[0]))
        if spread > tol * (1.0 + np.max(np.abs(vals))):
            raise LatticeError(
                "raw values are not a periodic deformation "
                f"(period-difference spread {spread:.3e} along axis {j})")
        cols.append(vals.mean(axis=0))
    A = np.stack(cols, axis=1)
    idx = domain.index_grid().reshape(-1, domain.d)
    raw = np.asarray(fn(idx), dtype=float).reshape(domain.shape + (domain.d,))
    u = raw - domain.coords() @ A.T
    return PeriodicDeformation(A, PeriodicNodalField(domain, u))


def random_displacement(domain, k=None, rng=None, amplitude=0.1):
    """IID random periodic displacement, mainly for randomized checks."""
    if rng is None:
        rng = np.random.default_rng(0)
    if k is None:
        k = domain.d
    vals = amplitude * rng.standard_normal(domain.shape + (k,))
    return PeriodicNodalField(domain, vals)
