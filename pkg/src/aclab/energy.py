"""Energy functionals: atomistic, cell-cutout coupled, interface-corrected.

Every energy model exposes

    energy(y)          scalar
    force(y)           ForceFunctional (nodal gradient wrt displacements)
    strain_gradient(y) d x d derivative wrt the macroscopic strain

so that the full first variation in a deformation direction z = (B, u_z) is
``variation(E, y, z) = force . u_z + strain_gradient : B``.  Forces are
assembled by scattering per-bond covectors; summation order is fixed by the
array layout, so outputs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import (
    LatticeDomain,
    PeriodicDeformation,
    PeriodicNodalField,
    roll_get,
)
from .mesh import (
    A_LBL,
    C_LBL,
    I_LBL,
    LOWER,
    UPPER,
    AtomisticMesh,
    DecompositionError,
    RegionDecomposition,
    SHAPE_VERTS,
    bond_profile,
    p1_stiffness,
)
from .potentials import cauchy_born_W, cauchy_born_dW


@dataclass(frozen=True)
class ForceFunctional:
    """Nodal covector f with pairing <Phi, u> = sum_x f(x) . u(x)."""

    domain: LatticeDomain
    values: np.ndarray

    def pair(self, u):
        vals = u.values if isinstance(u, PeriodicNodalField) else np.asarray(u)
        return float(np.sum(self.values * vals))

    def max_nodal_norm(self):
        return float(np.sqrt((self.values ** 2).sum(axis=-1)).max())

    def total(self):
        """Sum over nodes; zero for variations of translation-invariant energies."""
        return self.values.reshape(-1, self.values.shape[-1]).sum(axis=0)

    def __sub__(self, other):
        return ForceFunctional(self.domain, self.values - other.values)

    def __add__(self, other):
        return ForceFunctional(self.domain, self.values + other.values)

    def scaled(self, t):
        return ForceFunctional(self.domain, t * self.values)


def variation(E, y, z):
    """Exact first variation <dE(y), z> for a deformation direction z."""
    out = E.force(y).pair(z.u)
    B = z.A
    if np.any(B):
        out += float(np.sum(E.strain_gradient(y) * B))
    return out


def fd_variation(E, y, z, h=1e-5):
    """Central finite-difference oracle for the first variation."""
    return (E.energy(y.add_scaled(z, h)) - E.energy(y.add_scaled(z, -h))) / (2 * h)


# ----------------------------------------------------------------------------
# atomistic energy
# ----------------------------------------------------------------------------

class AtomisticEnergy:
    """Stored elastic energy eps^d sum_x V(D_R y(x)) on the full lattice."""

    def __init__(self, V, domain: LatticeDomain):
        if V.stencil.d != domain.d:
            raise ValueError("stencil dimension does not match the domain")
        if V.stencil.max_reach >= domain.n_side:
            raise ValueError("stencil does not fit inside the periodic cell")
        self.V = V
        self.domain = domain

    def _partials(self, y):
        g = y.stencil_diffs(self.V.stencil)
        return self.V.partials(g)

    def energy(self, y):
        g = y.stencil_diffs(self.V.stencil)
        return float(self.domain.eps ** self.domain.d * np.sum(self.V.value(g)))

    def force(self, y):
        dom = self.domain
        P = self._partials(y)
        f = np.zeros(dom.shape + (dom.d,))
        for k, r in enumerate(self.V.stencil.offsets):
            Pk = P[..., k, :]
            f += roll_get(Pk, tuple(-c for c in r), naxes=dom.d) - Pk
        f *= dom.eps ** (dom.d - 1)
        return ForceFunctional(dom, f)

    def strain_gradient(self, y):
        dom = self.domain
        P = self._partials(y)
        R = self.V.stencil.array.astype(float)
        return dom.eps ** dom.d * np.einsum(
            "xri,rj->ij", P.reshape(-1, R.shape[0], dom.d), R)


# ----------------------------------------------------------------------------
# cell-cutout coupled energy (atomistic sites plus Cauchy-Born complement)
# ----------------------------------------------------------------------------

# cut fraction of an element's area removed by the cell around each local vertex
_QCE_CUT_2D = {
    LOWER: (((0, 0), 0.125), ((1, 0), 0.25), ((1, 1), 0.125)),
    UPPER: (((0, 0), 0.125), ((1, 1), 0.125), ((0, 1), 0.25)),
}


class CellCutoutEnergy:
    """Coupled energy with per-site cells removed from the continuum integral.

    The atomistic sum runs over a chosen site set; the Cauchy-Born integral
    covers the domain minus the eps-cells centered at those sites.  Known to
    carry interface ghost forces; kept as the standard negative example.
    """

    def __init__(self, V, domain: LatticeDomain, site_mask):
        self.V = V
        self.domain = domain
        self.site_mask = np.asarray(site_mask, dtype=bool)
        if self.site_mask.shape != domain.shape:
            raise ValueError("site mask must match the site grid")
        if domain.d == 2:
            self.mesh = AtomisticMesh(domain)

    @classmethod
    def from_block(cls, V, domain, halfwidth):
        idx = domain.index_grid()
        mask = np.max(np.abs(idx), axis=-1) <= int(halfwidth)
        return cls(V, domain, mask)

    def _element_weights(self):
        """Continuum area per element after removing the site cells."""
        dom = self.domain
        m = self.site_mask.astype(float)
        if dom.d == 1:
            full = dom.eps
            cut = 0.5 * (m + roll_get(m, (1,)))
            return (full * (1.0 - cut))[None, ...]
        full = 0.5 * dom.eps ** 2
        out = np.empty((2,) + dom.shape)
        for shape in (LOWER, UPPER):
            cut = np.zeros(dom.shape)
            for dv, frac in _QCE_CUT_2D[shape]:
                cut += 2.0 * frac * roll_get(m, dv)
            out[shape] = full * (1.0 - cut)
        return out

    def _gradients(self, y):
        dom = self.domain
        if dom.d == 1:
            return y.diff((1,))[None, ..., None]  # (1, n, 1, 1)
        return self.mesh.p1_gradient(y).data

    def energy(self, y):
        dom = self.domain
        g = y.stencil_diffs(self.V.stencil)
        e_at = dom.eps ** dom.d * float(np.sum(self.V.value(g)[self.site_mask]))
        w = self._element_weights()
        G = self._gradients(y)
        e_cb = float(np.sum(w * cauchy_born_W(self.V, G)))
        return e_at + e_cb

    def force(self, y):
        dom = self.domain
        P = self.V.partials(y.stencil_diffs(self.V.stencil))
        mask = self.site_mask[..., None]
        f = np.zeros(dom.shape + (dom.d,))
        for k, r in enumerate(self.V.stencil.offsets):
            Pk = P[..., k, :] * mask
            f += roll_get(Pk, tuple(-c for c in r), naxes=dom.d) - Pk
        f *= dom.eps ** (dom.d - 1)

        w = self._element_weights()
        G = self._gradients(y)
        S = cauchy_born_dW(self.V, G) * w[..., None, None]
        if dom.d == 1:
            s = S[0, :, 0, 0]
            f[..., 0] += (roll_get(s, (-1,)) - s) / dom.eps
        else:
            from .mesh import SHAPE_GRAD_LAMBDA
            for shape in (LOWER, UPPER):
                for (dv, gl) in zip(SHAPE_VERTS[shape], SHAPE_GRAD_LAMBDA[shape]):
                    contrib = S[shape] @ (np.asarray(gl) / dom.eps)
                    f += roll_get(contrib, tuple(-c for c in dv), naxes=2)
        return ForceFunctional(dom, f)

    def strain_gradient(self, y):
        dom = self.domain
        P = self.V.partials(y.stencil_diffs(self.V.stencil))
        R = self.V.stencil.array.astype(float)
        Pm = P[self.site_mask]
        out = dom.eps ** dom.d * np.einsum("xri,rj->ij", Pm, R)
        w = self._element_weights()
        S = cauchy_born_dW(self.V, self._gradients(y))
        out += np.einsum("e,eij->ij", w.reshape(-1),
                         S.reshape(-1, dom.d, dom.d))
        return out


# ----------------------------------------------------------------------------
# interface functionals
# ----------------------------------------------------------------------------

class InterfaceModel:
    """Energy contribution depending only on interface bond differences.

    Subclasses provide ``bonds`` (list of (r_index, sx, sy)), the scaled
    energy, and per-bond first partials of the inner functional; forces and
    the stress assembly derive from those.
    """

    decomp: RegionDecomposition
    claims_locality = True
    claims_scaling = True

    def __init__(self, decomp):
        self.decomp = decomp
        self.mesh = decomp.mesh
        self.domain = decomp.mesh.domain
        self.stencil = decomp.stencil

    @property
    def bonds(self):
        raise NotImplementedError

    def energy(self, y):
        raise NotImplementedError

    def bond_partials(self, y):
        """(n_bonds, d) array of inner partial derivatives, bond order fixed."""
        raise NotImplementedError

    def homogeneous_bond_partials(self, F):
        """bond_partials at the homogeneous state y_F (hot path for correctors)."""
        yF = PeriodicDeformation.from_strain(self.domain, np.asarray(F, float))
        return self.bond_partials(yF)

    def lipschitz_table(self):
        raise NotImplementedError

    def aggregate_lipschitz(self):
        M = np.asarray(self.lipschitz_table(), dtype=float)
        w = self.stencil.norms
        return float(np.einsum("r,s,rs->", w, w, M))

    def _check_bonds_in_interface(self):
        bi = {tuple(b) for b in self.decomp.interface_bonds()}
        for b in self.bonds:
            if tuple(b) not in bi:
                k, sx, sy = b
                raise DecompositionError(
                    f"interface functional uses bond {self.stencil.offsets[k]} at "
                    f"slot {(sx, sy)} that is not contained in the interface region")

    def force(self, y):
        dom = self.domain
        P = self.bond_partials(y)
        f = np.zeros(dom.shape + (dom.d,))
        scale = dom.eps ** (dom.d - 1)
        for (k, sx, sy), p in zip(self.bonds, P):
            r = self.stencil.offsets[k]
            f[sx, sy] -= scale * p
            tx, ty = (sx + r[0]) % dom.n_side, (sy + r[1]) % dom.n_side
            f[tx, ty] += scale * p
        return ForceFunctional(dom, f)

    def strain_gradient(self, y):
        dom = self.domain
        P = self.bond_partials(y)
        out = np.zeros((dom.d, dom.d))
        for (k, _, _), p in zip(self.bonds, P):
            out += np.outer(p, self.stencil.offsets[k])
        return dom.eps ** dom.d * out


def _designated_edge_bonds(mesh, elem):
    """The two bonds that parametrize an element's gradient columns.

    Returns ((bond_e1, bond_e2)) as (offset, sx, sy): the e1 column comes
    from the bottom (lower) or top (upper) edge, the e2 column from the
    right (lower) or left (upper) edge.
    """
    shape, sx, sy = mesh.element_of_id(elem)
    n = mesh.n
    if shape == LOWER:
        b1 = ((1, 0), sx, sy)
        b2 = ((0, 1), (sx + 1) % n, sy)
    else:
        b1 = ((1, 0), sx, (sy + 1) % n)
        b2 = ((0, 1), sx, sy)
    return b1, b2


class BondSplitInterface(InterfaceModel):
    """Pair-interaction coupling: interface bond segments carry bond-wise
    Cauchy-Born integrals of the pair density along the deformed interpolant.

    Bonds from non-interacting sites are split over the elements they cross;
    the parts inside interface elements contribute phi(grad y(T) r) weighted
    by the exact segment measure (with the half weight on the interface
    boundary).  Patch-test consistent for any pair potential.
    """

    def __init__(self, V, decomp):
        super().__init__(decomp)
        from .potentials import PairSitePotential
        if not isinstance(V, PairSitePotential):
            raise TypeError("the bond-split coupling needs a pair potential")
        for req in ((1, 0), (0, 1)):
            if req not in self.stencil.offsets:
                raise ValueError("bond-split coupling requires nearest-neighbor offsets")
        self.V = V
        self._assemble_weights()

    def _assemble_weights(self):
        mesh, decomp = self.mesh, self.decomp
        n = mesh.n
        lbl = decomp.labels
        la = decomp.la_mask
        # per interface element and offset class: total weighted bond measure
        self.elem_weights = {}
        edge_pair_lbl = decomp._edge_pair
        from .mesh import EDGE_INCIDENT
        for sx in range(n):
            for sy in range(n):
                if la[sx, sy]:
                    continue
                for k, r in enumerate(self.stencil.offsets):
                    prof = bond_profile(tuple(r))
                    for key, length in prof.pieces:
                        if key[0] == "el":
                            sh, (cx, cy) = key[1], key[2]
                            ex, ey = (sx + cx) % n, (sy + cy) % n
                            if lbl[sh, ex, ey] == A_LBL:
                                raise DecompositionError(
                                    "bond from a non-interacting site crosses "
                                    "the atomistic region")
                            if lbl[sh, ex, ey] == I_LBL:
                                eid = mesh.element_id(sh, ex, ey)
                                w = self.elem_weights.setdefault(eid, {})
                                w[k] = w.get(k, 0.0) + float(length)
                        else:
                            kind, (cx, cy) = key[1], key[2]
                            ex, ey = (sx + cx) % n, (sy + cy) % n
                            for sh2, (dx, dy) in EDGE_INCIDENT[kind]:
                                tx, ty = (ex + dx) % n, (ey + dy) % n
                                if lbl[sh2, tx, ty] == A_LBL:
                                    raise DecompositionError(
                                        "bond from a non-interacting site touches "
                                        "the atomistic region")
                                if lbl[sh2, tx, ty] == I_LBL:
                                    eid = mesh.element_id(sh2, tx, ty)
                                    w = self.elem_weights.setdefault(eid, {})
                                    w[k] = w.get(k, 0.0) + 0.5 * float(length)
        # designated bonds for every participating element
        bond_index = {}
        bonds = []
        for eid in sorted(self.elem_weights):
            for (r, bx, by) in _designated_edge_bonds(mesh, eid):
                key = (self.stencil.index(r), bx, by)
                if key not in bond_index:
                    bond_index[key] = len(bonds)
                    bonds.append(key)
        self._bonds = bonds
        self._bond_index = bond_index
        self._check_bonds_in_interface()
        # vectorized views: weight matrix and designated-bond index arrays
        self._iel_ids = np.asarray(sorted(self.elem_weights), dtype=int)
        m = self.stencil.m
        Wm = np.zeros((len(self._iel_ids), m))
        i1s, i2s = [], []
        for i, eid in enumerate(self._iel_ids):
            for k, w in self.elem_weights[int(eid)].items():
                Wm[i, k] = w
            b1, b2 = _designated_edge_bonds(mesh, int(eid))
            i1s.append(bond_index[(self.stencil.index(b1[0]), b1[1], b1[2])])
            i2s.append(bond_index[(self.stencil.index(b2[0]), b2[1], b2[2])])
        self._Wm = Wm
        self._i1s = np.asarray(i1s, dtype=int)
        self._i2s = np.asarray(i2s, dtype=int)

    @property
    def bonds(self):
        return self._bonds

    def _element_gradients(self, y):
        return self.mesh.p1_gradient(y).flat[self._iel_ids]

    def energy(self, y):
        G = self._element_gradients(y)
        R = self.stencil.array.astype(float)
        total = 0.0
        for k in range(self.stencil.m):
            rho = np.linalg.norm(G @ R[k], axis=-1)
            total += float(np.sum(self._Wm[:, k] * self.V.bonds[k].phi(rho)))
        return self.domain.eps ** 2 * total

    def _partials_from_gradients(self, G):
        P = np.zeros((len(self._bonds), 2))
        R = self.stencil.array.astype(float)
        for k in range(self.stencil.m):
            gr = G @ R[k]
            rho = np.linalg.norm(gr, axis=-1)
            dphi = (self._Wm[:, k] * self.V.bonds[k].slope(rho))[:, None] * gr
            np.add.at(P, self._i1s, dphi * R[k][0])
            np.add.at(P, self._i2s, dphi * R[k][1])
        return P

    def bond_partials(self, y):
        return self._partials_from_gradients(self._element_gradients(y))

    def homogeneous_bond_partials(self, F):
        G = np.broadcast_to(np.asarray(F, dtype=float),
                            (len(self._iel_ids), 2, 2))
        return self._partials_from_gradients(G)

    def lipschitz_table(self):
        return self.V.lipschitz_table()


class NullPlaquetteTwist(InterfaceModel):
    """Wrap an interface functional with a formally nonzero null contribution.

    The added term c v . [D_e1 y(x) + D_e2 y(x+eps e1) - D_e1 y(x+eps e2)
    - D_e2 y(x)] vanishes identically, so energies and forces are unchanged,
    but the per-bond partial derivatives (hence the assembled stress) shift
    by a discretely divergence-free field.
    """

    def __init__(self, inner: InterfaceModel, cell_index, vec):
        super().__init__(inner.decomp)
        self.inner = inner
        self.vec = np.asarray(vec, dtype=float)
        n = self.mesh.n
        sx, sy = int(cell_index[0]) % n, int(cell_index[1]) % n
        i1 = self.stencil.index((1, 0))
        i2 = self.stencil.index((0, 1))
        self._extra = [
            ((i1, sx, sy), 1.0),
            ((i2, (sx + 1) % n, sy), 1.0),
            ((i1, sx, (sy + 1) % n), -1.0),
            ((i2, sx, sy), -1.0),
        ]
        bond_index = {b: i for i, b in enumerate(inner.bonds)}
        bonds = list(inner.bonds)
        for key, _ in self._extra:
            if key not in bond_index:
                bond_index[key] = len(bonds)
                bonds.append(key)
        self._bonds = bonds
        self._bond_index = bond_index
        self._check_bonds_in_interface()

    @property
    def bonds(self):
        return self._bonds

    def energy(self, y):
        return self.inner.energy(y)

    def bond_partials(self, y):
        P = np.zeros((len(self._bonds), 2))
        P[: len(self.inner.bonds)] = self.inner.bond_partials(y)
        for key, sgn in self._extra:
            P[self._bond_index[key]] += sgn * self.vec
        return P

    def homogeneous_bond_partials(self, F):
        P = np.zeros((len(self._bonds), 2))
        P[: len(self.inner.bonds)] = self.inner.homogeneous_bond_partials(F)
        for key, sgn in self._extra:
            P[self._bond_index[key]] += sgn * self.vec
        return P

    def lipschitz_table(self):
        return self.inner.lipschitz_table()


class GCCInterface(InterfaceModel):
    """Modified site potentials with linearly recombined arguments.

    Each listed interface site x carries V((sum_s C[x, r, s] g_s)_r); the
    coefficient tensor is the fitting target of the ghost-force removal
    preprocessing step.
    """

    def __init__(self, V, decomp, site_slots, coeffs=None):
        super().__init__(decomp)
        self.V = V
        self.site_slots = [tuple(map(int, s)) for s in site_slots]
        m = self.stencil.m
        if coeffs is None:
            coeffs = np.broadcast_to(np.eye(m), (len(self.site_slots), m, m)).copy()
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (len(self.site_slots), m, m):
            raise ValueError("coefficient tensor must be (n_sites, m, m)")
        self._bonds = [(k, sx, sy) for (sx, sy) in self.site_slots
                       for k in range(m)]
        self._check_bonds_in_interface()

    @property
    def bonds(self):
        return self._bonds

    def with_coeffs(self, coeffs):
        return GCCInterface(self.V, self.decomp, self.site_slots, coeffs)

    def _site_diffs(self, y):
        g = y.stencil_diffs(self.stencil)
        return np.stack([g[sx, sy] for (sx, sy) in self.site_slots])

    def energy(self, y):
        g = self._site_diffs(y)
        gt = np.einsum("xrs,xsd->xrd", self.coeffs, g)
        return float(self.domain.eps ** 2 * np.sum(self.V.value(gt)))

    def bond_partials(self, y):
        g = self._site_diffs(y)
        gt = np.einsum("xrs,xsd->xrd", self.coeffs, g)
        P = self.V.partials(gt)
        out = np.einsum("xrs,xrd->xsd", self.coeffs, P)
        return out.reshape(len(self._bonds), self.domain.d)

    def homogeneous_bond_partials(self, F):
        g0 = np.einsum("ij,rj->ri", np.asarray(F, dtype=float),
                       self.stencil.array.astype(float))
        g = np.broadcast_to(g0, (len(self.site_slots),) + g0.shape)
        gt = np.einsum("xrs,xsd->xrd", self.coeffs, g)
        P = self.V.partials(gt)
        out = np.einsum("xrs,xrd->xsd", self.coeffs, P)
        return out.reshape(len(self._bonds), self.domain.d)

    def lipschitz_table(self):
        Ma = self.V.lipschitz_table()
        C = np.abs(self.coeffs)
        tables = np.einsum("xrs,xqt,rq->xst", C, C, Ma)
        table = tables.max(axis=0) if len(C) else Ma * 0.0
        if self._has_boundary_bond():
            table = 2.0 * table
        return table

    def _has_boundary_bond(self):
        boundary = self.decomp.edge_on_interface_boundary()
        for (k, sx, sy) in self._bonds:
            prof = bond_profile(self.stencil.offsets[k])
            for key, _ in prof.pieces:
                if key[0] == "edge":
                    kind, (cx, cy) = key[1], key[2]
                    n = self.mesh.n
                    if boundary[kind, (sx + cx) % n, (sy + cy) % n]:
                        return True
        return False


class CutoutAsInterface(InterfaceModel):
    """The cell-cutout coupling recast as an interface functional.

    Reproduces CellCutoutEnergy exactly when combined with the atomistic
    and Cauchy-Born terms of the coupled energy; not patch test consistent,
    shipped for negative tests of the stress and corrector machinery.
    """

    claims_locality = False

    def __init__(self, V, decomp, site_mask):
        super().__init__(decomp)
        self.V = V
        self.site_mask = np.asarray(site_mask, dtype=bool)
        la = decomp.la_mask
        if np.any(la & ~self.site_mask):
            raise DecompositionError(
                "cutout site set must contain every interacting site")
        self._extra_sites = sorted(
            tuple(map(int, s)) for s in np.argwhere(self.site_mask & ~la))
        # element weights: continuum area inside interface elements
        helper = CellCutoutEnergy(V, self.domain, self.site_mask)
        w = helper._element_weights()
        full = 0.5 * self.domain.eps ** 2
        lbl = decomp.labels
        if np.any((lbl == C_LBL) & (np.abs(w - full) > 1e-15)):
            raise DecompositionError("continuum elements must avoid the site cells")
        if np.any((lbl == A_LBL) & (np.abs(w) > 1e-15)):
            raise DecompositionError("atomistic elements must be fully cut out")
        self._weights = np.where(lbl == I_LBL, w, 0.0)
        bonds = []
        bond_index = {}
        m = self.stencil.m
        for (sx, sy) in self._extra_sites:
            for k in range(m):
                key = (k, sx, sy)
                bond_index[key] = len(bonds)
                bonds.append(key)
        for eid in sorted(np.flatnonzero(self._weights.reshape(-1) > 0.0)):
            for (r, bx, by) in _designated_edge_bonds(self.mesh, int(eid)):
                key = (self.stencil.index(r), bx, by)
                if key not in bond_index:
                    bond_index[key] = len(bonds)
                    bonds.append(key)
        self._bonds = bonds
        self._bond_index = bond_index
        self._check_bonds_in_interface()

    @property
    def bonds(self):
        return self._bonds

    def energy(self, y):
        dom = self.domain
        g = y.stencil_diffs(self.stencil)
        vals = self.V.value(g)
        e_at = dom.eps ** 2 * float(sum(vals[s] for s in self._extra_sites))
        G = self.mesh.p1_gradient(y).data
        e_cb = float(np.sum(self._weights * cauchy_born_W(self.V, G)))
        return e_at + e_cb

    def bond_partials(self, y):
        dom = self.domain
        P = np.zeros((len(self._bonds), 2))
        g = y.stencil_diffs(self.stencil)
        Pv = self.V.partials(g)
        m = self.stencil.m
        for i, (sx, sy) in enumerate(self._extra_sites):
            P[i * m:(i + 1) * m] = Pv[sx, sy]
        G = self.mesh.p1_gradient(y)
        eps2 = dom.eps ** 2
        for eid in sorted(np.flatnonzero(self._weights.reshape(-1) > 0.0)):
            eid = int(eid)
            shape, sx, sy = self.mesh.element_of_id(eid)
            w = self._weights[shape, sx, sy]
            S = (w / eps2) * cauchy_born_dW(self.V, G.at(eid))
            b1, b2 = _designated_edge_bonds(self.mesh, eid)
            P[self._bond_index[(self.stencil.index(b1[0]), b1[1], b1[2])]] += S[:, 0]
            P[self._bond_index[(self.stencil.index(b2[0]), b2[1], b2[2])]] += S[:, 1]
        return P

    def lipschitz_table(self):
        # site part bounded by the potential table; the gradient part adds a
        # nearest-neighbor block bounded by the same curvature constants
        return 2.0 * self.V.lipschitz_table()


# ----------------------------------------------------------------------------
# the general coupled energy
# ----------------------------------------------------------------------------

class CoupledEnergy:
    """E(y) = eps^2 sum_{interacting sites} V + int_{continuum} W(grad y) + E_i(y)."""

    def __init__(self, V, interface: InterfaceModel, decomp: RegionDecomposition,
                 validate=True):
        self.V = V
        self.interface = interface
        self.decomp = decomp
        self.mesh = decomp.mesh
        self.domain = decomp.mesh.domain
        if validate:
            decomp.validate()
        self._c_mask = decomp.labels == C_LBL

    def energy(self, y):
        dom = self.domain
        g = y.stencil_diffs(self.V.stencil)
        vals = self.V.value(g)
        e_at = dom.eps ** 2 * float(vals[self.decomp.la_mask].sum())
        G = self.mesh.p1_gradient(y).data
        W = cauchy_born_W(self.V, G)
        e_cb = self.mesh.element_area * float(W[self._c_mask].sum())
        return e_at + e_cb + self.interface.energy(y)

    def force(self, y):
        dom = self.domain
        P = self.V.partials(y.stencil_diffs(self.V.stencil))
        mask = self.decomp.la_mask[..., None]
        f = np.zeros(dom.shape + (dom.d,))
        for k, r in enumerate(self.V.stencil.offsets):
            Pk = P[..., k, :] * mask
            f += roll_get(Pk, tuple(-c for c in r), naxes=2) - Pk
        f *= dom.eps

        G = self.mesh.p1_gradient(y).data
        S = cauchy_born_dW(self.V, G) * (self.mesh.element_area *
                                         self._c_mask)[..., None, None]
        from .mesh import SHAPE_GRAD_LAMBDA
        for shape in (LOWER, UPPER):
            for (dv, gl) in zip(SHAPE_VERTS[shape], SHAPE_GRAD_LAMBDA[shape]):
                contrib = S[shape] @ (np.asarray(gl) / dom.eps)
                f += roll_get(contrib, tuple(-c for c in dv), naxes=2)
        return ForceFunctional(dom, f) + self.interface.force(y)

    def strain_gradient(self, y):
        dom = self.domain
        P = self.V.partials(y.stencil_diffs(self.V.stencil))
        R = self.V.stencil.array.astype(float)
        Pm = P[self.decomp.la_mask]
        out = dom.eps ** 2 * np.einsum("xri,rj->ij", Pm, R)
        G = self.mesh.p1_gradient(y).data
        S = cauchy_born_dW(self.V, G)
        out += self.mesh.element_area * np.einsum(
            "e,eij->ij", self._c_mask.astype(float).reshape(-1),
            S.reshape(-1, 2, 2))
        return out + self.interface.strain_gradient(y)


# ----------------------------------------------------------------------------
# 1D quasinonlocal coupling
# ----------------------------------------------------------------------------

class QnlEnergy1D:
    """Second-neighbor interactions split into nearest-neighbor terms outside
    the atomistic index range {-K, ..., K}."""

    def __init__(self, pair, domain: LatticeDomain, K):
        from .potentials import PairPotential1D
        if not isinstance(pair, PairPotential1D):
            raise TypeError("the 1D coupling needs the first/second neighbor pair model")
        if domain.d != 1:
            raise ValueError("1D energy on a 1D domain only")
        if not 1 <= K <= domain.N:
            raise ValueError("need 1 <= K <= N (K = N leaves no continuum sites)")
        self.pair = pair
        self.domain = domain
        self.K = int(K)
        idx = domain.axis_indexes()
        self.in_a = np.abs(idx) <= self.K

    def _primes(self, y):
        """Backward differences y'_n over the site window."""
        return -y.diff((-1,))[..., 0]

    def energy(self, y):
        p = self._primes(y)
        pn = roll_get(p, (1,))
        phi1, phi2 = self.pair.phi1, self.pair.phi2
        e = np.sum(phi1.f(p))
        e += np.sum(phi2.f((p + pn)[self.in_a]))
        nc = ~self.in_a
        e += 0.5 * np.sum((phi2.f(2 * p) + phi2.f(2 * pn))[nc])
        return float(self.domain.eps * e)

    def _prime_gradient(self, y):
        p = self._primes(y)
        pn = roll_get(p, (1,))
        phi1, phi2 = self.pair.phi1, self.pair.phi2
        T = phi1.df(p)
        pair_d = phi2.df(p + pn) * self.in_a
        T += pair_d + roll_get(pair_d, (-1,))
        nc = (~self.in_a).astype(float)
        T += phi2.df(2 * p) * (nc + roll_get(nc, (-1,)))
        return T

    def force(self, y):
        T = self._prime_gradient(y)
        f = (T - roll_get(T, (1,)))[..., None]
        return ForceFunctional(self.domain, f)

    def strain_gradient(self, y):
        return np.array([[self.domain.eps * float(self._prime_gradient(y).sum())]])


# ----------------------------------------------------------------------------
# stability probe
# ----------------------------------------------------------------------------

def gradient_gram(domain: LatticeDomain):
    """Dense Gram matrix of int grad u : grad v on nodal displacement dofs."""
    if domain.d == 1:
        n = domain.n_side
        K = np.zeros((n, n))
        idx = np.arange(n)
        K[idx, idx] = 2.0
        K[idx, (idx + 1) % n] = -1.0
        K[idx, (idx - 1) % n] = -1.0
        K /= domain.eps
        return K
    mesh = AtomisticMesh(domain)
    Ks = p1_stiffness(mesh).toarray()
    n2 = Ks.shape[0]
    G = np.zeros((n2 * 2, n2 * 2))
    G[0::2, 0::2] = Ks
    G[1::2, 1::2] = Ks
    return G


def hessian_apply(E, y, u: PeriodicNodalField, step=1e-5):
    """Directional second variation via central differences of the force."""
    fp = E.force(y.add_scaled(u, step))
    fm = E.force(y.add_scaled(u, -step))
    return ForceFunctional(y.domain, (fp.values - fm.values) / (2 * step))


def stability_probe(E, y, step=1e-5):
    """Smallest generalized eigenvalue of the second variation against the
    gradient Gram matrix on mean-zero displacements (coercivity constant)."""
    import scipy.linalg

    dom = y.domain
    nsites = dom.num_sites
    d = dom.d
    ndof = nsites * d
    H = np.zeros((ndof, ndof))
    for j in range(ndof):
        e = np.zeros(ndof)
        e[j] = 1.0
        u = PeriodicNodalField(dom, e.reshape(dom.shape + (d,)))
        H[:, j] = hessian_apply(E, y, u, step).values.reshape(-1)
    H = 0.5 * (H + H.T)
    G = gradient_gram(dom)
    # mean-zero complement: drop the per-component constant directions
    C = np.zeros((ndof, d))
    for c in range(d):
        C[c::d, c] = 1.0
    Q, _ = np.linalg.qr(C, mode="complete")
    Z = Q[:, d:]
    w = scipy.linalg.eigh(Z.T @ H @ Z, Z.T @ G @ Z, eigvals_only=True)
    return float(w[0])
