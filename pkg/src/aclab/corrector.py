"""Edge-midpoint (Crouzeix-Raviart) machinery for stress corrections.

Discretely divergence-free element-wise tensor fields are exactly the
rotated gradients of fields that are piecewise affine and continuous at
edge midpoints, plus a constant.  This module reconstructs that potential
by spanning-tree path integration, builds the homogeneous-state correctors
for coupled energies, and assembles the modified stress whose deviation
from the atomistic stress is certified element by element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import PeriodicDeformation, roll_get
from .mesh import (
    A_LBL,
    C_LBL,
    I_LBL,
    EDGE_MIDPOINT,
    LOWER,
    UPPER,
    AtomisticMesh,
    NeighborhoodTables,
    P0TensorField,
    RegionDecomposition,
    SHAPE_EDGES,
    SHAPE_GRAD_LAMBDA,
    SHAPE_GRAD_ZETA,
    SHAPE_VERTS,
    interface_width,
)
from .potentials import cauchy_born_dW
from .stress import sigma_atomistic, sigma_coupled

ROT_J = np.array([[0.0, -1.0], [1.0, 0.0]])


class CorrectorError(RuntimeError):
    pass


def zeta_gradient_row_sum():
    """eps * sum of |grad zeta_f| over the edges of one element: 4 + 2 sqrt(2)."""
    out = []
    for shape in (LOWER, UPPER):
        total = sum(float(np.linalg.norm(g)) for g in SHAPE_GRAD_ZETA[shape])
        out.append(total)
    assert abs(out[0] - out[1]) < 1e-15
    return out[0]


@dataclass
class CRField:
    """Field given by values at edge midpoints, periodic identification.

    ``values`` has shape (3, n, n, k) in the edge-id layout of the mesh.
    """

    mesh: AtomisticMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.mesh.n
        if self.values.ndim == 3:
            self.values = self.values[..., None]
        if self.values.shape[:3] != (3, n, n):
            raise CorrectorError("CR values must be shaped (3, n, n, k)")

    @property
    def k(self):
        return self.values.shape[-1]

    @property
    def flat(self):
        return self.values.reshape(-1, self.k)

    @classmethod
    def zeros(cls, mesh, k=1):
        return cls(mesh, np.zeros((3, mesh.n, mesh.n, k)))

    @classmethod
    def random(cls, mesh, k=1, rng=None, amplitude=1.0):
        if rng is None:
            rng = np.random.default_rng(0)
        return cls(mesh, amplitude * rng.standard_normal((3, mesh.n, mesh.n, k)))

    def at_edge(self, edge):
        kind, sx, sy = self.mesh.edge_of_id(edge)
        return self.values[kind, sx, sy]

    def gradient(self):
        """(2, n, n, k, 2) element-wise gradients of the broken interpolant."""
        mesh = self.mesh
        eps = mesh.domain.eps
        n = mesh.n
        out = np.zeros((2, n, n, self.k, 2))
        for shape in (LOWER, UPPER):
            for (kind, dc), gz in zip(SHAPE_EDGES[shape], SHAPE_GRAD_ZETA[shape]):
                w = roll_get(self.values[kind], dc)
                out[shape] += w[..., :, None] * (np.asarray(gz) / eps)
        return out

    def gradient_field(self):
        return P0TensorField(self.mesh, self.gradient())

    def rotated_gradient_field(self):
        """P0 field of grad(w) J (discretely divergence-free by construction)."""
        return P0TensorField(self.mesh, self.gradient() @ ROT_J)

    def add(self, other, t=1.0):
        return CRField(self.mesh, self.values + t * other.values)

    def shift(self, const):
        return CRField(self.mesh, self.values + np.asarray(const))


def divergence_residuals(sigma: P0TensorField):
    """Per-vertex residuals |int sigma : grad(hat)| of the discrete divergence."""
    mesh = sigma.mesh
    n = mesh.n
    area = mesh.element_area
    eps = mesh.domain.eps
    k = sigma.data.shape[-2]
    out = np.zeros((n, n, k))
    for shape in (LOWER, UPPER):
        for dv, gl in zip(SHAPE_VERTS[shape], SHAPE_GRAD_LAMBDA[shape]):
            contrib = area * sigma.data[shape] @ (np.asarray(gl) / eps)
            # vertex at cell + dv receives this element's part
            out += roll_get(contrib, (-dv[0], -dv[1]), naxes=2)
    return out


def path_integral(sigma: P0TensorField, edge_path):
    """Integrate an element-wise field along a midpoint path (edge id list)."""
    mesh = sigma.mesh
    eps = mesh.domain.eps
    k = sigma.data.shape[-2]
    total = np.zeros(k)
    for f, fn in zip(edge_path[:-1], edge_path[1:]):
        shared = set(mesh.edge_elements(f)) & set(mesh.edge_elements(fn))
        if not shared:
            raise CorrectorError(
                f"path segment {f} -> {fn} does not stay inside one element")
        elem = min(shared)
        delta = _midpoint_delta(mesh, elem, f, fn)
        total += sigma.at(elem) @ (eps * delta)
    return total


def _midpoint_delta(mesh, elem, f, fn):
    """Midpoint difference q_{fn} - q_f inside the element's local frame."""
    shape, _, _ = mesh.element_of_id(elem)
    pos = {}
    for eid, (kind, dc) in zip(mesh.element_edges(elem), SHAPE_EDGES[shape]):
        pos[eid] = np.asarray(EDGE_MIDPOINT[kind]) + np.asarray(dc)
    return pos[fn] - pos[f]


class _EdgeGraph:
    """Spanning tree of the edge-midpoint graph with winding bookkeeping."""

    def __init__(self, mesh: AtomisticMesh, root=None):
        self.mesh = mesh
        n_edges = mesh.n_edges
        adjacency = [[] for _ in range(n_edges)]
        for elem in range(mesh.n_elements):
            eids = mesh.element_edges(elem)
            for i in range(3):
                for j in range(3):
                    if i != j:
                        adjacency[eids[i]].append((eids[j], elem))
        for lst in adjacency:
            lst.sort()
        self.adjacency = adjacency
        self.root = 0 if root is None else int(root)
        self._bfs()

    def _bfs(self):
        from collections import deque
        mesh = self.mesh
        n_edges = mesh.n_edges
        parent = np.full(n_edges, -1, dtype=int)
        parent_elem = np.full(n_edges, -1, dtype=int)
        # positions doubled to stay integer (midpoints sit on half-integers)
        pos2 = np.zeros((n_edges, 2), dtype=np.int64)
        seen = np.zeros(n_edges, dtype=bool)
        order = []
        seen[self.root] = True
        queue = deque([self.root])
        while queue:
            f = queue.popleft()
            order.append(f)
            for fn, elem in self.adjacency[f]:
                if not seen[fn]:
                    seen[fn] = True
                    parent[fn] = f
                    parent_elem[fn] = elem
                    delta = _midpoint_delta(self.mesh, elem, f, fn)
                    pos2[fn] = pos2[f] + np.round(2 * delta).astype(np.int64)
                    queue.append(fn)
        if not seen.all():
            raise CorrectorError("edge-midpoint graph is disconnected")
        self.parent = parent
        self.parent_elem = parent_elem
        self.pos2 = pos2
        self.order = order
        # non-tree arcs (deduplicated, deterministic order)
        arcs = []
        for f in range(n_edges):
            for fn, elem in self.adjacency[f]:
                if f < fn and parent[fn] != f and parent[f] != fn:
                    arcs.append((f, fn, elem))
        self.extra_arcs = arcs


def reconstruct_potential(sigma: P0TensorField, tol=1e-8, graph=None):
    """Split sigma into a constant plus the rotated gradient of a CR field.

    Refuses (CorrectorError) when sigma is not discretely divergence-free:
    the worst hat-function residual is reported.  Returns (sigma0, w,
    residual) with the element-wise defect max |sigma - sigma0 - grad(w) J|
    as the residual certificate.
    """
    mesh = sigma.mesh
    eps = mesh.domain.eps
    k = sigma.data.shape[-2]
    scale = 1.0 + float(np.abs(sigma.data).max())

    div = divergence_residuals(sigma)
    div_max = float(np.sqrt((div ** 2).sum(axis=-1)).max())
    if div_max > tol * scale:
        raise CorrectorError(
            f"field is not discretely divergence-free: hat residual {div_max:.3e}")

    alpha = sigma.data @ ROT_J.T  # (2, n, n, k, 2)
    alpha_field = P0TensorField(mesh, alpha)

    graph = graph if graph is not None else _EdgeGraph(mesh)
    n_edges = mesh.n_edges
    w_tilde = np.zeros((n_edges, k))
    for f in graph.order:
        p = graph.parent[f]
        if p < 0:
            continue
        elem = graph.parent_elem[f]
        delta = _midpoint_delta(mesh, elem, p, f)
        w_tilde[f] = w_tilde[p] + alpha_field.at(elem) @ (eps * delta)

    # period increments from the fundamental cycles
    vs, ds = [], []
    for f, fn, elem in graph.extra_arcs:
        delta = _midpoint_delta(mesh, elem, f, fn)
        d = w_tilde[f] + alpha_field.at(elem) @ (eps * delta) - w_tilde[fn]
        v2 = graph.pos2[f] + np.round(2 * delta).astype(np.int64) - graph.pos2[fn]
        vs.append(eps * v2 / 2.0)
        ds.append(d)
    V = np.asarray(vs)
    D = np.asarray(ds)
    A, *_ = np.linalg.lstsq(V, D, rcond=None)  # (2, k)
    A = A.T  # (k, 2): linear growth w(x) ~ A x
    cyc_res = float(np.abs(D - V @ A.T).max()) if len(D) else 0.0
    if cyc_res > tol * scale:
        raise CorrectorError(
            f"cycle residual {cyc_res:.3e} exceeds tolerance; field is not "
            "a consistent discrete gradient")

    w_per = w_tilde - (eps * graph.pos2 / 2.0) @ A.T
    w = CRField(mesh, w_per.reshape(3, mesh.n, mesh.n, k))
    sigma0 = A @ ROT_J

    defect = sigma.data - sigma0 - (w.gradient() @ ROT_J)
    residual = float(np.sqrt((defect ** 2).sum(axis=(-2, -1))).max())
    return sigma0, w, residual


# ----------------------------------------------------------------------------
# correctors for coupled energies
# ----------------------------------------------------------------------------

def psi_of_strain(V, interface, decomp: RegionDecomposition, F, tol=1e-8):
    """Corrector with Sigma_coupled(y_F; T) = dW(F) + grad(psi)(T) J.

    Requires the coupling to be patch test consistent at F (the divergence
    residual of the stress deviation is exactly the ghost force), globally
    energy consistent (the reconstructed constant must vanish), and the
    atomistic region to be connected so the normalization psi = 0 there is
    meaningful.
    """
    mesh = decomp.mesh
    if not decomp.interior_a_connected():
        raise CorrectorError("atomistic region is disconnected; the corrector "
                             "normalization is undefined")
    F = np.asarray(F, dtype=float)
    yF = PeriodicDeformation.from_strain(mesh.domain, F)
    sig = sigma_coupled(V, interface, yF, decomp)
    dW = cauchy_born_dW(V, F)
    dev = P0TensorField(mesh, sig.data - dW)
    scale = 1.0 + float(np.abs(dW).max())
    try:
        sigma0, w, residual = reconstruct_potential(dev, tol=tol)
    except CorrectorError as err:
        raise CorrectorError(
            f"coupling is not patch test consistent at this strain: {err}") from err
    if np.abs(sigma0).max() > tol * scale:
        raise CorrectorError(
            f"nonzero mean stress deviation {np.abs(sigma0).max():.3e}; "
            "coupling is not globally energy consistent")
    w = _normalize_on_atomistic(w, decomp)
    return w, residual


def _normalize_on_atomistic(w: CRField, decomp: RegionDecomposition):
    ref = _atomistic_edge_ids(decomp)
    const = w.flat[ref].mean(axis=0)
    return w.shift(-const)


def _atomistic_edge_ids(decomp):
    has_a = decomp.edge_has(A_LBL).reshape(-1)
    ids = np.flatnonzero(has_a)
    if ids.size == 0:
        raise CorrectorError("no atomistic edges to normalize against")
    return ids


class CorrectorMap:
    """Fast evaluator of the homogeneous-state corrector at edge midpoints.

    The corrector value at an edge is the path integral of the rotated
    stress deviation from a root edge inside the atomistic region; only
    interface elements contribute for consistent couplings, so each edge
    stores its compressed list of (interface element, step) pairs.  Per
    strain the interface stresses are assembled once and memoized on a
    quantized key.
    """

    def __init__(self, V, interface, decomp: RegionDecomposition, quantum=1e-6):
        self.V = V
        self.interface = interface
        self.decomp = decomp
        self.mesh = decomp.mesh
        self.quantum = quantum
        if not decomp.interior_a_connected():
            raise CorrectorError("atomistic region is disconnected")
        root = int(_atomistic_edge_ids(decomp)[0])
        self.graph = _EdgeGraph(self.mesh, root=root)
        self._build_geometry()
        self._compress_paths()
        self._memo = {}

    # -- geometry ---------------------------------------------------------

    def _build_geometry(self):
        from .mesh import EDGE_INCIDENT, bond_profile
        mesh, decomp = self.mesh, self.decomp
        n = mesh.n
        labels = decomp.labels
        iel_ids = sorted(int(e) for e in decomp.elements_with_label(I_LBL))
        self.iel_ids = iel_ids
        self.iel_index = {e: i for i, e in enumerate(iel_ids)}
        m = self.V.stencil.m
        # weights of interacting-site bonds against each interface element
        from .stress import _stress_pattern
        la = decomp.la_mask
        W = np.zeros((len(iel_ids), m))
        for k, r in enumerate(self.V.stencil.offsets):
            for (sh, c), wgt in _stress_pattern(tuple(r)):
                # element (sh, s) sees the bond anchored at s - c
                for i, eid in enumerate(iel_ids):
                    shape, sx, sy = mesh.element_of_id(eid)
                    if shape != sh:
                        continue
                    bx, by = (sx - c[0]) % n, (sy - c[1]) % n
                    if la[bx, by]:
                        W[i, k] += wgt
        self.W_la = 2.0 * W  # includes eps^2 / |T|

        # interface-bond weights with the boundary-modified characteristic fn
        boundary = decomp.edge_on_interface_boundary()
        triples = []
        for b_idx, (k, sx, sy) in enumerate(self.interface.bonds):
            r = self.interface.stencil.offsets[k]
            prof = bond_profile(tuple(r))
            for key, length in prof.pieces:
                if key[0] == "el":
                    sh, (cx, cy) = key[1], key[2]
                    ex, ey = (sx + cx) % n, (sy + cy) % n
                    if labels[sh, ex, ey] == I_LBL:
                        eid = mesh.element_id(sh, ex, ey)
                        triples.append((self.iel_index[eid], b_idx,
                                        2.0 * float(length)))
                else:
                    kind, (cx, cy) = key[1], key[2]
                    ex, ey = (sx + cx) % n, (sy + cy) % n
                    wfac = 1.0 if boundary[kind, ex, ey] else 0.5
                    for sh2, (dx, dy) in EDGE_INCIDENT[kind]:
                        tx, ty = (ex + dx) % n, (ey + dy) % n
                        if labels[sh2, tx, ty] == I_LBL:
                            eid = mesh.element_id(sh2, tx, ty)
                            triples.append((self.iel_index[eid], b_idx,
                                            2.0 * wfac * float(length)))
        self.bond_triples = triples

    def _compress_paths(self):
        mesh = self.mesh
        labels_flat = self.decomp.element_label_flat()
        n_edges = mesh.n_edges
        steps = [None] * n_edges
        steps[self.graph.root] = ()
        eps = mesh.domain.eps
        for f in self.graph.order:
            p = self.graph.parent[f]
            if p < 0:
                continue
            elem = int(self.graph.parent_elem[f])
            base = steps[p]
            if labels_flat[elem] == I_LBL:
                delta = _midpoint_delta(mesh, elem, p, f)
                base = base + ((self.iel_index[elem], eps * delta),)
            steps[f] = base
        self.steps = steps

    # -- per-strain stress deviation ---------------------------------------

    def _prep(self, F):
        key = tuple(np.round(np.asarray(F, float).reshape(-1) /
                             self.quantum).astype(np.int64))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        F = np.asarray(F, dtype=float)
        dW = cauchy_born_dW(self.V, F)
        R = self.V.stencil.array.astype(float)
        P = self.V.partials(np.einsum("ij,rj->ri", F, R))
        sig = np.einsum("em,mi,mj->eij", self.W_la, P, R)
        bp = self.interface.homogeneous_bond_partials(F)
        offsets = self.interface.stencil.array.astype(float)
        for iel, b_idx, w in self.bond_triples:
            k = self.interface.bonds[b_idx][0]
            sig[iel] += w * np.outer(bp[b_idx], offsets[k])
        alpha = (sig - dW) @ ROT_J.T
        self._memo[key] = alpha
        return alpha

    def value(self, F, edge):
        """psi(F; q_edge), normalized to zero on the atomistic region."""
        alpha = self._prep(F)
        total = np.zeros(2)
        for iel, delta in self.steps[int(edge)]:
            total += alpha[iel] @ delta
        return total

    def field(self, F):
        """Full corrector as a CRField (matches the reconstruction path)."""
        mesh = self.mesh
        vals = np.zeros((mesh.n_edges, 2))
        for e in range(mesh.n_edges):
            vals[e] = self.value(F, e)
        return CRField(mesh, vals.reshape(3, mesh.n, mesh.n, 2))


def modified_corrector(psi_map: CorrectorMap, y):
    """Edge-averaged corrector: each midpoint evaluates the homogeneous
    corrector at the mean deformation gradient of its non-atomistic patch."""
    mesh = psi_map.mesh
    decomp = psi_map.decomp
    labels_flat = decomp.element_label_flat()
    G = mesh.p1_gradient(y)
    gflat = G.flat
    n_edges = mesh.n_edges
    vals = np.zeros((n_edges, 2))
    for e in range(n_edges):
        elems = mesh.edge_elements(e)
        keep = [el for el in elems if labels_flat[el] != A_LBL]
        if not keep:
            continue  # psi vanishes on the atomistic region for any strain
        Ff = np.mean([gflat[el] for el in keep], axis=0)
        vals[e] = psi_map.value(Ff, e)
    return CRField(mesh, vals.reshape(3, mesh.n, mesh.n, 2))


def edge_strain_average(mesh, decomp, y, edge):
    """The local strain average F_f used by the modified corrector."""
    labels_flat = decomp.element_label_flat()
    G = mesh.p1_gradient(y)
    keep = [el for el in mesh.edge_elements(edge) if labels_flat[el] != A_LBL]
    if not keep:
        return np.zeros((2, 2))
    return np.mean([G.flat[el] for el in keep], axis=0)


# ----------------------------------------------------------------------------
# modified stress and the element-wise error certificate
# ----------------------------------------------------------------------------

def prefactors(decomp: RegionDecomposition, M_a, M_i, width=None):
    """Element-wise constants of the certified deviation bound."""
    if width is None:
        width = interface_width(decomp)
    lbl = decomp.element_label_flat()
    out = np.zeros(lbl.shape)
    out[lbl == I_LBL] = (M_i + M_a) * (1.0 + 7.0 * width)
    out[lbl == C_LBL] = M_a + 7.0 * (M_i + M_a) * width
    return out


@dataclass
class StressErrorReport:
    """Per-element deviation R = modified coupled stress - atomistic stress."""

    R: P0TensorField
    prefactor: np.ndarray
    osc: np.ndarray
    eps: float

    @property
    def deviation(self):
        return np.sqrt((self.R.flat ** 2).sum(axis=(-2, -1)))

    @property
    def bound(self):
        return self.eps * self.prefactor * self.osc

    @property
    def max_violation(self):
        return float((self.deviation - self.bound).max())

    @property
    def ok(self):
        return bool(np.all(self.deviation <= self.bound + 1e-14))

    def rhs_dual_bound(self, p):
        """eps (sum |T| [M_T osc]^p)^{1/p} over non-atomistic elements."""
        area = self.R.mesh.element_area
        vals = self.prefactor * self.osc
        if np.isinf(p):
            return self.eps * float(vals.max())
        return self.eps * float((area * (vals ** p).sum()) ** (1.0 / p))

    def lp_norm_of_R(self, p):
        return self.R.lp_norm(p)


def modified_stress_and_error(V, interface, decomp, y, psi_map=None,
                              tables=None, M_a=None, M_i=None, width=None):
    """Assemble the corrected coupled stress and its certified deviation.

    Returns (sigma_hat, psi_hat, report): sigma_hat still represents the
    coupled first variation, equals the Cauchy-Born stress at homogeneous
    states away from the core, and matches the atomistic stress on the
    atomistic region, so the deviation R vanishes there structurally.
    """
    from .potentials import aggregate_lipschitz
    mesh = decomp.mesh
    if psi_map is None:
        psi_map = CorrectorMap(V, interface, decomp)
    if tables is None:
        tables = NeighborhoodTables(mesh, V.stencil)
    psi_hat = modified_corrector(psi_map, y)
    sig_ac = sigma_coupled(V, interface, y, decomp)
    sig_hat = P0TensorField(mesh, sig_ac.data - psi_hat.gradient() @ ROT_J)
    sig_a = sigma_atomistic(V, y, mesh)
    R = sig_hat - sig_a
    G = mesh.p1_gradient(y)
    osc = tables.osc_omega(G, decomp)
    if M_a is None:
        M_a = aggregate_lipschitz(V)
    if M_i is None:
        M_i = interface.aggregate_lipschitz()
    pref = prefactors(decomp, M_a, M_i, width=width)
    report = StressErrorReport(R, pref, osc, mesh.domain.eps)
    return sig_hat, psi_hat, report
