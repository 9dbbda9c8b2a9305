"""Multi-body site potentials, Cauchy-Born density, and Lipschitz data.

A site potential V maps the tuple of stencil differences g = (g_r)_{r in R}
to an energy per site.  Partial derivatives are supplied analytically;
central finite differences serve as the testing oracle, never as the primary
path.  Each shipped potential declares a table of bounds M[r, s] on the
l2-operator norms of its second partials, valid on a stated compact range of
bond stretches (global bounds are unrealistic for anything but the harmonic
pair, so the checks sample only the declared range).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import Stencil, second_neighbor_stencil


class SitePotential:
    """Interface for multi-body potentials over a fixed stencil.

    ``value`` and ``partials`` are vectorized: ``g`` has shape (..., m, d)
    with offsets in the stencil's canonical order.
    """

    stencil: Stencil

    def value(self, g):
        raise NotImplementedError

    def partials(self, g):
        """All first partials d_r V, shape (..., m, d)."""
        raise NotImplementedError

    def partial(self, g, r):
        """Single first partial for offset r (vector in R^d)."""
        return self.partials(g)[..., self.stencil.index(r), :]

    def second_partial(self, g, r, s):
        """d x d matrix of second partials for offsets (r, s)."""
        raise NotImplementedError

    def lipschitz_table(self):
        """(m, m) bounds on ||d_{r,s} V|| over the declared range."""
        raise NotImplementedError

    def sample_range(self, rng, size):
        """Random difference tuples inside the declared validity range."""
        raise NotImplementedError

    def fd_partials(self, g, rel_step=1e-6):
        """Central finite-difference oracle for the first partials."""
        g = np.asarray(g, dtype=float)
        out = np.zeros_like(g)
        for k in range(g.shape[-2]):
            for j in range(g.shape[-1]):
                h = rel_step * max(1.0, abs(float(g[..., k, j])))
                gp = g.copy()
                gm = g.copy()
                gp[..., k, j] += h
                gm[..., k, j] -= h
                out[..., k, j] = (self.value(gp) - self.value(gm)) / (2 * h)
        return out


def aggregate_lipschitz(V):
    """Weighted sum over the Lipschitz table: sum_{r,s} |r| |s| M[r, s]."""
    M = np.asarray(V.lipschitz_table(), dtype=float)
    w = V.stencil.norms
    return float(np.einsum("r,s,rs->", w, w, M))


def l2_operator_norm(mat, iters=50, rng=None):
    """l2 operator norm estimate by power iteration on mat^T mat."""
    mat = np.asarray(mat, dtype=float)
    if rng is None:
        rng = np.random.default_rng(7)
    v = rng.standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    sq = mat.T @ mat
    lam = 0.0
    for _ in range(iters):
        w = sq @ v
        lam = np.linalg.norm(w)
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))


@dataclass(frozen=True)
class RadialBond:
    """Scalar bond energy phi(|g|) with analytic derivatives.

    ``lo``/``hi`` delimit the stretch range on which the curvature bound
    (hence the Lipschitz table entry) is declared.
    """

    phi: callable
    dphi: callable
    d2phi: callable
    lo: float
    hi: float
    name: str = "bond"

    def slope(self, rho):
        return self.dphi(rho) / rho

    def opnorm_bound(self, samples=512):
        # eigenvalues of the 2nd derivative of phi(|g|) are d2phi and dphi/rho
        rho = np.linspace(self.lo, self.hi, samples)
        return float(max(np.max(np.abs(self.d2phi(rho))),
                         np.max(np.abs(self.slope(rho)))))


def harmonic_bond(k=1.0, lo=1e-6, hi=4.0):
    """phi(rho) = k rho^2 / 2; curvature exactly k everywhere."""
    return RadialBond(lambda r: 0.5 * k * r * r,
                      lambda r: k * r,
                      lambda r: k * np.ones_like(np.asarray(r, dtype=float)),
                      lo, hi, name=f"harmonic(k={k})")


def _smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _smootherstep_d(t):
    inside = (t > 0.0) & (t < 1.0)
    tt = np.where(inside, t, 0.5)
    return np.where(inside, 30.0 * tt ** 2 * (1.0 - tt) ** 2, 0.0)


def _smootherstep_d2(t):
    inside = (t > 0.0) & (t < 1.0)
    tt = np.where(inside, t, 0.5)
    return np.where(inside, 60.0 * tt * (1.0 - 3.0 * tt + 2.0 * tt * tt), 0.0)


def morse_bond(depth=1.0, alpha=3.0, rho0=1.0, r_on=None, r_cut=None,
               lo=None, hi=None):
    """Morse well with a C^2 smootherstep cutoff between r_on and r_cut."""
    if r_on is None:
        r_on = rho0 + 1.0
    if r_cut is None:
        r_cut = r_on + 0.5
    if lo is None:
        lo = 0.55 * rho0
    if hi is None:
        hi = r_cut
    width = r_cut - r_on

    def raw(r):
        e = np.exp(-alpha * (np.asarray(r, dtype=float) - rho0))
        return depth * (1.0 - e) ** 2 - depth

    def draw(r):
        e = np.exp(-alpha * (np.asarray(r, dtype=float) - rho0))
        return 2.0 * depth * alpha * e * (1.0 - e)

    def d2raw(r):
        e = np.exp(-alpha * (np.asarray(r, dtype=float) - rho0))
        return 2.0 * depth * alpha ** 2 * e * (2.0 * e - 1.0)

    def cut(r):
        return 1.0 - _smootherstep((np.asarray(r, dtype=float) - r_on) / width)

    def dcut(r):
        return -_smootherstep_d((np.asarray(r, dtype=float) - r_on) / width) / width

    def d2cut(r):
        return -_smootherstep_d2((np.asarray(r, dtype=float) - r_on) / width) / width ** 2

    phi = lambda r: raw(r) * cut(r)
    dphi = lambda r: draw(r) * cut(r) + raw(r) * dcut(r)
    d2phi = lambda r: d2raw(r) * cut(r) + 2.0 * draw(r) * dcut(r) + raw(r) * d2cut(r)
    return RadialBond(phi, dphi, d2phi, lo, hi,
                      name=f"morse(D={depth},a={alpha},rho0={rho0})")


class PairSitePotential(SitePotential):
    """Pair potential V(g) = sum_r phi_r(|g_r|) over the stencil.

    ``bonds`` maps each canonical offset to a RadialBond; by default one
    bond function is shared per offset length class, with the rest length
    scaled to |r|.
    """

    def __init__(self, stencil, bonds):
        self.stencil = stencil
        if isinstance(bonds, RadialBond):
            bonds = [bonds] * stencil.m
        self.bonds = list(bonds)
        if len(self.bonds) != stencil.m:
            raise ValueError("need one bond function per stencil offset")

    def value(self, g):
        g = np.asarray(g, dtype=float)
        rho = np.linalg.norm(g, axis=-1)
        total = np.zeros(g.shape[:-2])
        for k, b in enumerate(self.bonds):
            total = total + b.phi(rho[..., k])
        return total if total.shape else float(total)

    def partials(self, g):
        g = np.asarray(g, dtype=float)
        rho = np.linalg.norm(g, axis=-1)
        out = np.empty_like(g)
        for k, b in enumerate(self.bonds):
            out[..., k, :] = b.slope(rho[..., k])[..., None] * g[..., k, :]
        return out

    def second_partial(self, g, r, s):
        if tuple(r) != tuple(s):
            return np.zeros((self.stencil.d, self.stencil.d))
        k = self.stencil.index(r)
        gk = np.asarray(g, dtype=float)[k]
        rho = np.linalg.norm(gk)
        n = gk / rho
        b = self.bonds[k]
        eye = np.eye(self.stencil.d)
        return b.d2phi(rho) * np.outer(n, n) + b.slope(rho) * (eye - np.outer(n, n))

    def lipschitz_table(self):
        return np.diag([b.opnorm_bound() for b in self.bonds])

    def sample_range(self, rng, size):
        m, d = self.stencil.m, self.stencil.d
        g = np.zeros(size + (m, d))
        for k, (b, r) in enumerate(zip(self.bonds, self.stencil.offsets)):
            rho = rng.uniform(b.lo, b.hi, size=size)
            if d == 1:
                direction = np.where(rng.random(size) < 0.5, -1.0, 1.0)[..., None]
            else:
                theta = rng.uniform(0, 2 * np.pi, size=size)
                direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
            g[..., k, :] = rho[..., None] * direction
        return g


def harmonic_nn_potential(d=2, k=1.0):
    """Nearest-neighbor harmonic pair: phi(g) = |g|^2 / 2 by default."""
    from .lattice import nearest_neighbor_stencil
    st = nearest_neighbor_stencil(d)
    return PairSitePotential(st, harmonic_bond(k))


def harmonic_nn_diag_potential(k_nn=1.0, k_diag=0.6):
    """Harmonic pair on nearest plus diagonal neighbors."""
    from .lattice import nn_and_diagonal_stencil
    st = nn_and_diagonal_stencil()
    bonds = []
    for r in st.offsets:
        kk = k_nn if abs(r[0]) + abs(r[1]) == 1 else k_diag
        bonds.append(harmonic_bond(kk))
    return PairSitePotential(st, bonds)


def morse_nn_diag_potential(depth=0.5, alpha=2.5):
    """Morse pair with smooth cutoff on nearest plus diagonal neighbors.

    Rest lengths scale with the reference bond length; the declared range is
    a +-30% stretch window per bond class.
    """
    from .lattice import nn_and_diagonal_stencil
    st = nn_and_diagonal_stencil()
    bonds = []
    for r in st.offsets:
        ell = float(np.linalg.norm(r))
        bonds.append(morse_bond(depth=depth, alpha=alpha / ell, rho0=ell,
                                r_on=1.45 * ell, r_cut=1.8 * ell,
                                lo=0.7 * ell, hi=1.3 * ell))
    return PairSitePotential(st, bonds)


@dataclass(frozen=True)
class ScalarInteraction:
    """Even scalar interaction f(g) with analytic derivatives and bounds.

    ``curve_bound`` bounds |f''| and ``third_bound`` bounds |f'''| on the
    declared range [lo, hi] of |g| (f' is curve_bound-Lipschitz there).
    """

    f: callable
    df: callable
    d2f: callable
    curve_bound: float
    third_bound: float
    lo: float
    hi: float
    name: str = "phi"


def harmonic_scalar(k=1.0, lo=0.0, hi=4.0):
    return ScalarInteraction(lambda g: 0.5 * k * g * g,
                             lambda g: k * np.asarray(g, dtype=float),
                             lambda g: k * np.ones_like(np.asarray(g, dtype=float)),
                             curve_bound=k, third_bound=0.0,
                             lo=lo, hi=hi, name=f"harmonic(k={k})")


def quartic_scalar(a=1.0, b=0.25, gmax=4.0):
    """f(g) = a g^2/2 + b g^4/4, even, with closed-form bounds on |g|<=gmax."""
    return ScalarInteraction(
        lambda g: 0.5 * a * g * g + 0.25 * b * g ** 4,
        lambda g: a * np.asarray(g, dtype=float) + b * np.asarray(g, dtype=float) ** 3,
        lambda g: a + 3.0 * b * np.asarray(g, dtype=float) ** 2,
        curve_bound=a + 3.0 * b * gmax ** 2,
        third_bound=6.0 * b * gmax,
        lo=-gmax, hi=gmax, name=f"quartic(a={a},b={b})")


class PairPotential1D(SitePotential):
    """1D first/second neighbor pair model over the stencil {-2,-1,1,2}.

    V(g) = [phi1(g_1) + phi1(g_{-1}) + phi2(g_2) + phi2(g_{-2})] / 2, with
    phi1, phi2 even about the origin.
    """

    def __init__(self, phi1: ScalarInteraction, phi2: ScalarInteraction):
        self.stencil = second_neighbor_stencil(1)
        self.phi1 = phi1
        self.phi2 = phi2
        # canonical order (-2, -1, 1, 2)
        self._which = [self.phi2, self.phi1, self.phi1, self.phi2]

    def value(self, g):
        g = np.asarray(g, dtype=float)[..., 0]
        total = np.zeros(g.shape[:-1])
        for k, phi in enumerate(self._which):
            total = total + 0.5 * phi.f(g[..., k])
        return total if total.shape else float(total)

    def partials(self, g):
        g = np.asarray(g, dtype=float)
        out = np.empty_like(g)
        for k, phi in enumerate(self._which):
            out[..., k, 0] = 0.5 * phi.df(g[..., k, 0])
        return out

    def second_partial(self, g, r, s):
        if tuple(np.atleast_1d(r)) != tuple(np.atleast_1d(s)):
            return np.zeros((1, 1))
        k = self.stencil.index(r)
        gv = np.asarray(g, dtype=float)[k, 0]
        return np.array([[0.5 * self._which[k].d2f(gv)]])

    def lipschitz_table(self):
        return np.diag([0.5 * phi.curve_bound for phi in self._which])

    def sample_range(self, rng, size):
        g = np.zeros(size + (4, 1))
        for k, phi in enumerate(self._which):
            sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
            lo = max(phi.lo, 0.3)
            g[..., k, 0] = sign * rng.uniform(lo, phi.hi, size=size)
        return g


def cauchy_born_W(V, F):
    """Cauchy-Born stored energy density W(F) = V((F r)_{r in R})."""
    F = np.asarray(F, dtype=float)
    R = V.stencil.array.astype(float)
    g = np.einsum("...ij,rj->...ri", F, R)
    return V.value(g)


def cauchy_born_dW(V, F):
    """dW(F) = sum_r d_r V(F R) outer r (first Piola-Kirchhoff at strain F)."""
    F = np.asarray(F, dtype=float)
    R = V.stencil.array.astype(float)
    g = np.einsum("...ij,rj->...ri", F, R)
    P = V.partials(g)
    return np.einsum("...ri,rj->...ij", P, R)


def fd_cauchy_born_dW(V, F, step=1e-6):
    """Finite-difference oracle for dW."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    out = np.zeros_like(F)
    for i in range(d):
        for j in range(d):
            h = step * max(1.0, abs(float(F[i, j])))
            Fp, Fm = F.copy(), F.copy()
            Fp[i, j] += h
            Fm[i, j] -= h
            out[i, j] = (cauchy_born_W(V, Fp) - cauchy_born_W(V, Fm)) / (2 * h)
    return out
