"""Atomistic triangulation, exact bond geometry, regions, and coarse meshes.

The atomistic mesh splits every lattice cell into two triangles along the
main diagonal.  All bond/triangle intersection parameters are rational in
the integers (lattice vertices, integer offsets), so bond integrals of
characteristic functions are computed with exact fraction arithmetic and
converted to floating point only at the final weight sum.  This makes the
bond density identity exact.

Conventions for a cell anchored at integer point c (grid units):

    lower triangle: (c, c+e1, c+e1+e2)      upper: (c, c+e1+e2, c+e2)
    edges: H = [c, c+e1], V = [c, c+e2], D = [c, c+e1+e2]

Meshes are immutable after construction; queries are pure.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .lattice import LatticeDomain, PeriodicDeformation, roll_get

LOWER, UPPER = 0, 1
EDGE_H, EDGE_V, EDGE_D = 0, 1, 2

A_LBL, I_LBL, C_LBL = 0, 1, 2
LABEL_NAMES = {A_LBL: "a", I_LBL: "i", C_LBL: "c"}

# triangle vertices relative to the cell anchor, grid units
SHAPE_VERTS = (
    ((0, 0), (1, 0), (1, 1)),
    ((0, 0), (1, 1), (0, 1)),
)

# hat-function gradients per local vertex, grid units (scale by 1/eps)
SHAPE_GRAD_LAMBDA = (
    ((-1.0, 0.0), (1.0, -1.0), (0.0, 1.0)),
    ((0.0, -1.0), (1.0, 0.0), (-1.0, 1.0)),
)

# local edges per shape: (kind, cell offset); order fixed once
SHAPE_EDGES = (
    ((EDGE_H, (0, 0)), (EDGE_V, (1, 0)), (EDGE_D, (0, 0))),
    ((EDGE_D, (0, 0)), (EDGE_H, (0, 1)), (EDGE_V, (0, 0))),
)

# edge-midpoint basis gradients per local edge, grid units (scale by 1/eps)
SHAPE_GRAD_ZETA = (
    ((0.0, -2.0), (2.0, 0.0), (-2.0, 2.0)),
    ((2.0, -2.0), (0.0, 2.0), (-2.0, 0.0)),
)

# the two elements incident to an edge of given kind at cell c
EDGE_INCIDENT = {
    EDGE_H: ((LOWER, (0, 0)), (UPPER, (0, -1))),
    EDGE_V: ((UPPER, (0, 0)), (LOWER, (-1, 0))),
    EDGE_D: ((LOWER, (0, 0)), (UPPER, (0, 0))),
}

EDGE_MIDPOINT = {EDGE_H: (0.5, 0.0), EDGE_V: (0.0, 0.5), EDGE_D: (0.5, 0.5)}
EDGE_VECTOR = {EDGE_H: (1, 0), EDGE_V: (0, 1), EDGE_D: (1, 1)}


class MeshError(ValueError):
    pass


class DecompositionError(ValueError):
    """Region decomposition violates a structural requirement."""


# ----------------------------------------------------------------------------
# exact bond classification against the structured mesh
# ----------------------------------------------------------------------------

def _ffloor(x: Fraction) -> int:
    return x.numerator // x.denominator


def _classify(p):
    """Classify a rational point against the mesh: vertex, edge, or element."""
    px, py = p
    fx = px - _ffloor(px)
    fy = py - _ffloor(py)
    if fx == 0 and fy == 0:
        return ("vertex", (int(px), int(py)))
    if fy == 0:
        return ("edge", EDGE_H, (_ffloor(px), int(py)))
    if fx == 0:
        return ("edge", EDGE_V, (int(px), _ffloor(py)))
    if fx == fy:
        return ("edge", EDGE_D, (_ffloor(px), _ffloor(py)))
    shape = LOWER if fy < fx else UPPER
    return ("el", shape, (_ffloor(px), _ffloor(py)))


@dataclass(frozen=True)
class BondProfile:
    """Exact decomposition of the unit-parametrized bond [0, r] over the mesh.

    ``pieces`` are (key, Fraction length) for open subintervals classified as
    element interiors or edge interiors; ``points`` classify the breakpoints
    (used for closed-set membership questions).  Everything is relative to a
    bond anchored at the integer origin; translating the anchor by an integer
    vector translates all keys.
    """

    pieces: tuple
    points: tuple


@lru_cache(maxsize=None)
def bond_profile(r):
    r1, r2 = int(r[0]), int(r[1])
    if r1 == 0 and r2 == 0:
        raise MeshError("zero bond offset")
    ts = {Fraction(0), Fraction(1)}
    for comp in (r1, r2, r2 - r1):
        if comp != 0:
            for k in range(abs(comp) + 1):
                ts.add(Fraction(k, abs(comp)))
    ts = sorted(t for t in ts if 0 <= t <= 1)
    pieces = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        tm = (t0 + t1) / 2
        key = _classify((tm * r1, tm * r2))
        if key[0] == "vertex":  # cannot happen for an open midpoint
            raise MeshError("degenerate bond classification")
        pieces.append((key, t1 - t0))
    points = tuple(_classify((t * r1, t * r2)) for t in ts)
    return BondProfile(tuple(pieces), points)


# ----------------------------------------------------------------------------
# exact chi integrals for arbitrary lattice triangles
# ----------------------------------------------------------------------------

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def triangle_area2(tri):
    """Twice the signed area, integer."""
    return _cross(tri[0], tri[1], tri[2])


def bond_chi_integral(tri, x, r):
    """Exact bond integral of the half-on-edges characteristic function.

    ``tri`` is a (3, 2) integer-vertex triangle, the bond runs from lattice
    point ``x`` to ``x + r`` (grid units).  Returns a Fraction: the measure
    of the bond fraction inside the open triangle plus half the measure of
    any part lying inside an edge.
    """
    tri = [tuple(int(c) for c in v) for v in tri]
    x = tuple(int(c) for c in x)
    r = tuple(int(c) for c in r)
    area2 = triangle_area2(tri)
    if area2 == 0:
        raise MeshError("degenerate triangle")
    if area2 < 0:
        tri = [tri[0], tri[2], tri[1]]
    p0 = (Fraction(x[0]), Fraction(x[1]))
    dp = (Fraction(r[0]), Fraction(r[1]))

    tlo, thi = Fraction(0), Fraction(1)
    colinear_edge = None
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        # signed offset of p(t) against edge (a, b): f(t) = f0 + t df
        f0 = (b[0] - a[0]) * (p0[1] - a[1]) - (b[1] - a[1]) * (p0[0] - a[0])
        df = (b[0] - a[0]) * dp[1] - (b[1] - a[1]) * dp[0]
        if df == 0:
            if f0 < 0:
                return Fraction(0)
            if f0 == 0:
                colinear_edge = (a, b)
            continue
        t_hit = -f0 / df
        if df > 0:
            tlo = max(tlo, t_hit)
        else:
            thi = min(thi, t_hit)
    if thi <= tlo:
        return Fraction(0)
    if colinear_edge is None:
        return thi - tlo
    # bond lies on the supporting line of an edge: the inside part is the
    # overlap with that closed edge and carries weight one half
    return Fraction(1, 2) * (thi - tlo)


def bond_density_residual(tri, r, domain=None):
    """Relative residual of the bond density identity for one (T, r) pair.

    Sums the exact chi integrals over every lattice bond translate and
    compares with the triangle area; the identity is exact, so the residual
    is zero up to nothing at all (the arithmetic is rational).
    """
    tri = np.asarray(tri, dtype=int)
    r = np.asarray(r, dtype=int)
    area = abs(Fraction(int(triangle_area2(tri)), 2))
    lo = tri.min(axis=0) - np.maximum(np.abs(r), 0) - 1
    hi = tri.max(axis=0) + np.maximum(np.abs(r), 0) + 1
    total = Fraction(0)
    for x0 in range(int(lo[0]), int(hi[0]) + 1):
        for x1 in range(int(lo[1]), int(hi[1]) + 1):
            total += bond_chi_integral(tri, (x0, x1), r)
    return float(abs(total - area)) / float(area)


def verify_bond_density(tri, r):
    """Absolute residual |eps^2 sum - |T|| in grid units (see residual op)."""
    tri = np.asarray(tri, dtype=int)
    area = abs(Fraction(int(triangle_area2(tri)), 2))
    return bond_density_residual(tri, r) * float(area)


# ----------------------------------------------------------------------------
# the atomistic mesh
# ----------------------------------------------------------------------------

class AtomisticMesh:
    """Uniform triangulation of the periodic cell, two triangles per lattice cell."""

    def __init__(self, domain: LatticeDomain):
        if domain.d != 2:
            raise MeshError("the atomistic mesh is two-dimensional")
        self.domain = domain
        self.n = domain.n_side

    @property
    def n_cells(self):
        return self.n * self.n

    @property
    def n_elements(self):
        return 2 * self.n_cells

    @property
    def n_edges(self):
        return 3 * self.n_cells

    @property
    def element_area(self):
        return 0.5 * self.domain.eps ** 2

    def cell_anchor(self, sx, sy):
        """Unwrapped integer anchor of the cell stored at slot (sx, sy)."""
        ax = self.domain.axis_indexes()
        return np.array([ax[sx], ax[sy]])

    def element_id(self, shape, sx, sy):
        return shape * self.n_cells + sx * self.n + sy

    def element_of_id(self, elem):
        shape, rest = divmod(int(elem), self.n_cells)
        sx, sy = divmod(rest, self.n)
        return shape, sx, sy

    def edge_id(self, kind, sx, sy):
        return kind * self.n_cells + sx * self.n + sy

    def edge_of_id(self, edge):
        kind, rest = divmod(int(edge), self.n_cells)
        sx, sy = divmod(rest, self.n)
        return kind, sx, sy

    def wrap_cell(self, c):
        return int(c[0]) % self.n, int(c[1]) % self.n

    def element_vertices(self, elem):
        """(3, 2) unwrapped integer vertices."""
        shape, sx, sy = self.element_of_id(elem)
        anchor = self.cell_anchor(sx, sy)
        return anchor + np.asarray(SHAPE_VERTS[shape], dtype=int)

    def element_edges(self, elem):
        shape, sx, sy = self.element_of_id(elem)
        out = []
        for kind, (dx, dy) in SHAPE_EDGES[shape]:
            cx, cy = self.wrap_cell((sx + dx, sy + dy))
            out.append(self.edge_id(kind, cx, cy))
        return out

    def edge_elements(self, edge):
        kind, sx, sy = self.edge_of_id(edge)
        out = []
        for shape, (dx, dy) in EDGE_INCIDENT[kind]:
            cx, cy = self.wrap_cell((sx + dx, sy + dy))
            out.append(self.element_id(shape, cx, cy))
        return out

    def edge_midpoint(self, edge):
        kind, sx, sy = self.edge_of_id(edge)
        anchor = self.cell_anchor(sx, sy)
        return self.domain.eps * (anchor + np.asarray(EDGE_MIDPOINT[kind]))

    def nodal_values(self, y):
        """Values of a deformation/field on the site grid, shape (n, n, k)."""
        if isinstance(y, PeriodicDeformation):
            return y.values()
        return y.values

    def p1_gradient(self, y):
        """Element-wise constant gradient of the P1 interpolant.

        Returns a P0TensorField with data[shape, sx, sy] the (k, 2) gradient
        of the element at that slot.  Columns are directional derivatives
        along e1 and e2, assembled from edge differences so homogeneous
        states are exact.
        """
        if isinstance(y, PeriodicDeformation):
            g1 = y.diff((1, 0))
            g2 = y.diff((0, 1))
        else:
            g1 = y.diff((1, 0))
            g2 = y.diff((0, 1))
        k = g1.shape[-1]
        data = np.empty((2, self.n, self.n, k, 2))
        # lower: d/dx1 along the bottom edge, d/dx2 along the right edge
        data[LOWER, ..., 0] = g1
        data[LOWER, ..., 1] = roll_get(g2, (1, 0))
        # upper: d/dx2 along the left edge, d/dx1 along the top edge
        data[UPPER, ..., 0] = roll_get(g1, (0, 1))
        data[UPPER, ..., 1] = g2
        return P0TensorField(self, data)


@dataclass
class P0TensorField:
    """Element-wise constant (k x 2) tensor field on the atomistic mesh."""

    mesh: AtomisticMesh
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        n = self.mesh.n
        if self.data.shape[:3] != (2, n, n):
            raise MeshError("P0 field data must be shaped (2, n, n, ...)")

    @property
    def flat(self):
        return self.data.reshape((self.mesh.n_elements,) + self.data.shape[3:])

    def at(self, elem):
        shape, sx, sy = self.mesh.element_of_id(elem)
        return self.data[shape, sx, sy]

    def mean(self):
        """Area-weighted average (elements have equal area)."""
        return self.flat.mean(axis=0)

    def lp_norm(self, p):
        """L^p norm with the entrywise l^p matrix norm inside."""
        flat = np.abs(self.flat.reshape(self.mesh.n_elements, -1))
        if np.isinf(p):
            return float(flat.max())
        area = self.mesh.element_area
        return float((area * (flat ** p).sum()) ** (1.0 / p))

    def __sub__(self, other):
        return P0TensorField(self.mesh, self.data - other.data)

    def __add__(self, other):
        return P0TensorField(self.mesh, self.data + other.data)


def discrete_gradient_norm(y, p):
    """(eps^2 sum_j sum_x |D_{e_j} y(x)|_p^p)^{1/p}, the nodal-difference form."""
    dom = y.domain if isinstance(y, PeriodicDeformation) else y.domain
    g1 = y.diff((1, 0))
    g2 = y.diff((0, 1))
    stacked = np.abs(np.stack([g1, g2]))
    if np.isinf(p):
        return float(stacked.max())
    return float((dom.eps ** 2 * (stacked ** p).sum()) ** (1.0 / p))


def oscillation(gfield: P0TensorField, elements):
    """Max pairwise Frobenius gradient jump over an element set, divided by eps.

    ``elements`` is a sequence of element ids whose union covers the region
    of interest (positive-area membership semantics).
    """
    ids = np.asarray(list(elements), dtype=int)
    if ids.size == 0:
        raise MeshError("oscillation over an empty region")
    vals = gfield.flat[ids].reshape(ids.size, -1)
    if ids.size == 1:
        return 0.0
    diff = vals[:, None, :] - vals[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).max() / gfield.mesh.domain.eps)


# ----------------------------------------------------------------------------
# convex overlap predicates (exact, integer)
# ----------------------------------------------------------------------------

def _hull(points):
    """Monotone-chain convex hull of integer points."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _axes_of(poly):
    out = []
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        out.append((-(b[1] - a[1]), b[0] - a[0]))
    return out


def _proj_range(poly, axis):
    vals = [p[0] * axis[0] + p[1] * axis[1] for p in poly]
    return min(vals), max(vals)


def convex_overlap(P, Q, strict=True):
    """Exact separating-axis test for convex integer polygons.

    strict=True  -> positive-area overlap (interiors intersect)
    strict=False -> closed sets share at least one point
    """
    P = _hull(P)
    Q = _hull(Q)
    for axis in _axes_of(P) + _axes_of(Q):
        pmin, pmax = _proj_range(P, axis)
        qmin, qmax = _proj_range(Q, axis)
        if strict:
            if pmax <= qmin or qmax <= pmin:
                return False
        else:
            if pmax < qmin or qmax < pmin:
                return False
    return True


@lru_cache(maxsize=None)
def _touching_pattern(shape):
    """Relative (shape', dcell) of elements sharing at least a point."""
    tri = SHAPE_VERTS[shape]
    out = []
    for dx in range(-2, 3):
        for dy in range(-2, 3):
            for sh2 in (LOWER, UPPER):
                tri2 = [(v[0] + dx, v[1] + dy) for v in SHAPE_VERTS[sh2]]
                if convex_overlap(tri, tri2, strict=False):
                    out.append((sh2, dx, dy))
    return tuple(out)


@lru_cache(maxsize=None)
def _omega_a_pattern(shape, offsets):
    """Relative elements with positive-area overlap with the two-offset fattening.

    The fattening of T is the union over offset pairs (r1, r2) of the convex
    sets T + [0, eps r1] + [0, eps r2]; membership is by positive-area
    intersection, so the returned element set covers the true region.
    """
    tri = SHAPE_VERTS[shape]
    offs = [tuple(r) for r in offsets]
    zonos = []
    for i, r1 in enumerate(offs):
        for r2 in offs[i:]:
            pts = []
            for v in tri:
                for a in (0, 1):
                    for b in (0, 1):
                        pts.append((v[0] + a * r1[0] + b * r2[0],
                                    v[1] + a * r1[1] + b * r2[1]))
            zonos.append(_hull(pts))
    reach = max(abs(c) for r in offs for c in r)
    span = 2 * reach + 2
    out = set()
    for dx in range(-span, span + 1):
        for dy in range(-span, span + 1):
            for sh2 in (LOWER, UPPER):
                tri2 = [(v[0] + dx, v[1] + dy) for v in SHAPE_VERTS[sh2]]
                if any(convex_overlap(z, tri2, strict=True) for z in zonos):
                    out.add((sh2, dx, dy))
    return tuple(sorted(out))


# ----------------------------------------------------------------------------
# region decomposition
# ----------------------------------------------------------------------------

class RegionDecomposition:
    """Partition of the atomistic mesh into atomistic/interface/continuum elements.

    Derived data: the interacting node set (sites whose bonds touch the
    closed atomistic region), the interface bond set (bonds contained in the
    closed interface region), and the interface boundary edges.
    """

    def __init__(self, mesh: AtomisticMesh, labels, stencil):
        labels = np.asarray(labels, dtype=np.int8)
        if labels.shape != (2, mesh.n, mesh.n):
            raise DecompositionError("labels must be shaped (2, n, n)")
        self.mesh = mesh
        self.labels = labels
        self.stencil = stencil
        self._edge_pair = self._edge_label_pairs()
        self.la_mask = self._interacting_sites()
        self.bi_mask = self._interface_bond_mask()
        self._validated = False

    @classmethod
    def from_block(cls, mesh, stencil, core_halfwidth, interface_layers):
        """Centered square atomistic block with a square interface ring.

        A cell [i, i+1]^2 is atomistic when contained in [-a, a]^2 and
        interface when contained in [-a-w, a+w]^2 (a = core_halfwidth and
        w = interface_layers, in lattice units); both triangles of a cell
        share its label.
        """
        n, N = mesh.n, mesh.domain.N
        a, w = int(core_halfwidth), int(interface_layers)
        if a + w >= N:
            raise DecompositionError("block plus interface must leave a continuum region")
        ax = mesh.domain.axis_indexes()
        ix, iy = np.meshgrid(ax, ax, indexing="ij")
        lo = np.maximum(np.minimum(ix, iy), np.minimum(-ix - 1, -iy - 1))
        hw = np.maximum(np.maximum(ix + 1, iy + 1), np.maximum(-ix, -iy))
        cell = np.full((n, n), C_LBL, dtype=np.int8)
        cell[hw <= a + w] = I_LBL
        cell[hw <= a] = A_LBL
        labels = np.stack([cell, cell])
        return cls(mesh, labels, stencil)

    @classmethod
    def all_continuum(cls, mesh, stencil):
        labels = np.full((2, mesh.n, mesh.n), C_LBL, dtype=np.int8)
        return cls(mesh, labels, stencil)

    # -- label queries -------------------------------------------------------

    def _edge_label_pairs(self):
        lbl = self.labels
        pair = np.empty((3, self.mesh.n, self.mesh.n, 2), dtype=np.int8)
        pair[EDGE_H, ..., 0] = lbl[LOWER]
        pair[EDGE_H, ..., 1] = roll_get(lbl[UPPER], (0, -1))
        pair[EDGE_V, ..., 0] = lbl[UPPER]
        pair[EDGE_V, ..., 1] = roll_get(lbl[LOWER], (-1, 0))
        pair[EDGE_D, ..., 0] = lbl[LOWER]
        pair[EDGE_D, ..., 1] = lbl[UPPER]
        return pair

    def edge_has(self, label):
        return np.any(self._edge_pair == label, axis=-1)

    def edge_on_interface_boundary(self):
        """Edges with interface on exactly one side."""
        has_i = np.any(self._edge_pair == I_LBL, axis=-1)
        all_i = np.all(self._edge_pair == I_LBL, axis=-1)
        return has_i & ~all_i

    def vertex_has(self, label):
        """(n, n) mask: some element incident to the vertex carries the label."""
        lbl = self.labels
        hit = np.zeros((self.mesh.n, self.mesh.n), dtype=bool)
        for shape, cells in ((LOWER, ((0, 0), (-1, 0), (-1, -1))),
                             (UPPER, ((0, 0), (-1, -1), (0, -1)))):
            for c in cells:
                hit |= roll_get(lbl[shape] == label, c)
        return hit

    def element_label_flat(self):
        return self.labels.reshape(-1)

    def elements_with_label(self, label):
        return np.flatnonzero(self.element_label_flat() == label)

    # -- derived sets ----------------------------------------------------------

    def _mask_for_items(self, r, predicate_el, predicate_edge, predicate_vertex,
                        combine_all):
        """Combine per-item predicates over a bond profile into a site mask."""
        prof = bond_profile(tuple(r))
        n = self.mesh.n
        out = np.ones((n, n), dtype=bool) if combine_all else np.zeros((n, n), dtype=bool)
        items = [key for key, _ in prof.pieces] + list(prof.points)
        for key in items:
            if key[0] == "el":
                grid = predicate_el(key[1], key[2])
            elif key[0] == "edge":
                grid = predicate_edge(key[1], key[2])
            else:
                grid = predicate_vertex(key[1])
            if combine_all:
                out &= grid
            else:
                out |= grid
        return out

    def _interacting_sites(self):
        lblA = self.labels == A_LBL
        edgeA = self.edge_has(A_LBL)
        vertA = self.vertex_has(A_LBL)
        n = self.mesh.n
        mask = np.zeros((n, n), dtype=bool)
        for r in self.stencil.offsets:
            mask |= self._mask_for_items(
                r,
                lambda sh, c: roll_get(lblA[sh], c),
                lambda kind, c: roll_get(edgeA[kind], c),
                lambda v: roll_get(vertA, v),
                combine_all=False)
        return mask

    def _interface_bond_mask(self):
        lblI = self.labels == I_LBL
        edgeI = self.edge_has(I_LBL)
        vertI = self.vertex_has(I_LBL)
        n = self.mesh.n
        out = np.zeros((self.stencil.m, n, n), dtype=bool)
        for k, r in enumerate(self.stencil.offsets):
            out[k] = self._mask_for_items(
                r,
                lambda sh, c: roll_get(lblI[sh], c),
                lambda kind, c: roll_get(edgeI[kind], c),
                lambda v: roll_get(vertI, v),
                combine_all=True)
        return out

    def interface_bonds(self):
        """Sorted list of (r_index, sx, sy) for bonds inside the interface."""
        return [tuple(map(int, idx)) for idx in np.argwhere(self.bi_mask)]

    def validate(self):
        """Check that bonds from interacting sites stay out of the continuum."""
        lblC_only_el = self.labels == C_LBL
        edge_all_c = np.all(self._edge_pair == C_LBL, axis=-1)
        vert_all_c = ~(self.vertex_has(A_LBL) | self.vertex_has(I_LBL))
        for r in self.stencil.offsets:
            bad = self._mask_for_items(
                r,
                lambda sh, c: roll_get(lblC_only_el[sh], c),
                lambda kind, c: roll_get(edge_all_c[kind], c),
                lambda v: roll_get(vert_all_c, v),
                combine_all=False)
            viol = self.la_mask & bad
            if viol.any():
                sx, sy = map(int, np.argwhere(viol)[0])
                ax = self.mesh.domain.axis_indexes()
                site = (int(ax[sx]), int(ax[sy]))
                raise DecompositionError(
                    f"bond from interacting site {site} with offset {tuple(r)} "
                    "leaves the atomistic-interface region")
        self._validated = True

    def interior_a_connected(self):
        """Element-adjacency (shared edge) connectivity of the atomistic region."""
        a_ids = set(map(int, self.elements_with_label(A_LBL)))
        if not a_ids:
            return True
        start = next(iter(sorted(a_ids)))
        seen = {start}
        stack = [start]
        while stack:
            e = stack.pop()
            for edge in self.mesh.element_edges(e):
                for nb in self.mesh.edge_elements(edge):
                    if nb in a_ids and nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
        return len(seen) == len(a_ids)


# ----------------------------------------------------------------------------
# interaction neighborhoods
# ----------------------------------------------------------------------------

class NeighborhoodTables:
    """Per-element neighborhood element sets for oscillation measures.

    Sets are element-id arrays covering the corresponding region (elements
    with positive-area intersection); oscillation over the covering set
    dominates oscillation over the region, so certified bounds that use
    these sets are conservative.
    """

    def __init__(self, mesh: AtomisticMesh, stencil):
        self.mesh = mesh
        self.stencil = stencil
        self._touch = {sh: _touching_pattern(sh) for sh in (LOWER, UPPER)}
        offs = tuple(tuple(r) for r in stencil.offsets)
        self._fat = {sh: _omega_a_pattern(sh, offs) for sh in (LOWER, UPPER)}
        self._union = {
            sh: tuple(sorted(set(self._touch[sh]) | set(self._fat[sh])))
            for sh in (LOWER, UPPER)
        }

    def _ids(self, elem, pattern):
        shape, sx, sy = self.mesh.element_of_id(elem)
        out = []
        for sh2, dx, dy in pattern:
            cx, cy = self.mesh.wrap_cell((sx + dx, sy + dy))
            out.append(self.mesh.element_id(sh2, cx, cy))
        return np.asarray(out, dtype=int)

    def omega_a(self, elem):
        """Elements covering the two-offset interaction fattening of T."""
        shape = self.mesh.element_of_id(elem)[0]
        return self._ids(elem, self._fat[shape])

    def omega(self, elem, decomp: RegionDecomposition):
        """Fattening united with touching elements, minus the atomistic region."""
        shape = self.mesh.element_of_id(elem)[0]
        ids = self._ids(elem, self._union[shape])
        lbl = decomp.element_label_flat()[ids]
        return ids[lbl != A_LBL]

    def omega_c(self, elem, decomp: RegionDecomposition):
        """Continuum part of the touching-element patch."""
        shape = self.mesh.element_of_id(elem)[0]
        ids = self._ids(elem, self._touch[shape])
        lbl = decomp.element_label_flat()[ids]
        return ids[lbl == C_LBL]

    def osc_omega_a(self, gfield):
        """osc(g; omega_T^a) for every element, as a flat array."""
        return self._osc_all(gfield, lambda e: self.omega_a(e))

    def osc_omega(self, gfield, decomp):
        out = np.zeros(self.mesh.n_elements)
        for e in range(self.mesh.n_elements):
            ids = self.omega(e, decomp)
            out[e] = oscillation(gfield, ids) if ids.size else 0.0
        return out

    def osc_omega_c(self, gfield, decomp):
        out = np.zeros(self.mesh.n_elements)
        for e in range(self.mesh.n_elements):
            ids = self.omega_c(e, decomp)
            out[e] = oscillation(gfield, ids) if ids.size else 0.0
        return out

    def _osc_all(self, gfield, getter):
        out = np.zeros(self.mesh.n_elements)
        for e in range(self.mesh.n_elements):
            out[e] = oscillation(gfield, getter(e))
        return out


def neighborhoods(mesh, decomp, stencil, elem):
    """The three neighborhood element sets (omega_T^a, omega_T, omega_T^c)."""
    tables = NeighborhoodTables(mesh, stencil)
    return (tables.omega_a(elem), tables.omega(elem, decomp),
            tables.omega_c(elem, decomp))


# ----------------------------------------------------------------------------
# interface width
# ----------------------------------------------------------------------------

def interface_width(decomp: RegionDecomposition):
    """Longest shortest midpoint-path from an interface edge to the atomistic
    region, in units of eps (Dijkstra on the edge-midpoint graph)."""
    mesh = decomp.mesh
    has_a = decomp.edge_has(A_LBL).reshape(-1)
    has_i = decomp.edge_has(I_LBL).reshape(-1)
    if not has_a.any():
        raise DecompositionError("interface width requires a nonempty atomistic region")
    if not has_i.any():
        return 0.0

    # arcs between the three edge midpoints of each element
    mids = {EDGE_H: np.array([0.5, 0.0]), EDGE_V: np.array([0.0, 0.5]),
            EDGE_D: np.array([0.5, 0.5])}
    dist = np.full(mesh.n_edges, np.inf)
    heap = []
    for e in np.flatnonzero(has_a):
        dist[e] = 0.0
        heap.append((0.0, int(e)))
    heapq.heapify(heap)
    eps = mesh.domain.eps

    # precompute adjacency: for each element, its 3 edges and pair distances
    n_cells = mesh.n_cells
    adjacency = [[] for _ in range(mesh.n_edges)]
    for elem in range(mesh.n_elements):
        shape, sx, sy = mesh.element_of_id(elem)
        eids, pos = [], []
        for kind, (dx, dy) in SHAPE_EDGES[shape]:
            cx, cy = mesh.wrap_cell((sx + dx, sy + dy))
            eids.append(mesh.edge_id(kind, cx, cy))
            pos.append(mids[kind] + np.array([dx, dy]))
        for i in range(3):
            for j in range(3):
                if i != j:
                    w = eps * float(np.linalg.norm(pos[i] - pos[j]))
                    adjacency[eids[i]].append((eids[j], w))

    while heap:
        d, e = heapq.heappop(heap)
        if d > dist[e]:
            continue
        for nb, w in adjacency[e]:
            nd = d + w
            if nd < dist[nb] - 1e-15:
                dist[nb] = nd
                heapq.heappush(heap, (nd, nb))

    vals = dist[np.flatnonzero(has_i)]
    if not np.all(np.isfinite(vals)):
        raise DecompositionError("interface edge unreachable from the atomistic region")
    return float(vals.max() / eps)


# ----------------------------------------------------------------------------
# coarse meshes and interpolation
# ----------------------------------------------------------------------------

def _tri_area(v):
    return 0.5 * abs(_cross(tuple(v[0]), tuple(v[1]), tuple(v[2])))


class CoarseMesh:
    """Periodic triangulation with vertices on lattice sites.

    Elements are stored with unwrapped integer vertices inside the box
    [-N, N]^2; identification on the torus is by wrapping vertices.
    """

    def __init__(self, domain: LatticeDomain, elements):
        self.domain = domain
        self.elements = np.asarray(elements, dtype=int)
        if self.elements.ndim != 3 or self.elements.shape[1:] != (3, 2):
            raise MeshError("elements must be shaped (n_el, 3, 2)")
        areas = [_tri_area(el) for el in self.elements]
        if any(a == 0 for a in areas):
            raise MeshError("degenerate coarse element")
        self._areas_grid = np.asarray(areas)
        total = self._areas_grid.sum()
        if abs(total - domain.n_side ** 2) > 1e-9:
            raise MeshError(f"coarse mesh does not cover the torus (area {total})")

    @property
    def n_elements(self):
        return len(self.elements)

    def areas(self):
        return self._areas_grid * self.domain.eps ** 2

    def diams(self):
        e = self.elements
        d01 = np.linalg.norm(e[:, 0] - e[:, 1], axis=1)
        d12 = np.linalg.norm(e[:, 1] - e[:, 2], axis=1)
        d02 = np.linalg.norm(e[:, 0] - e[:, 2], axis=1)
        return self.domain.eps * np.max(np.stack([d01, d12, d02]), axis=0)

    def shape_regularity(self):
        """Max circumradius/inradius ratio over elements."""
        worst = 0.0
        for el, area in zip(self.elements, self._areas_grid):
            a = np.linalg.norm(el[1] - el[2])
            b = np.linalg.norm(el[0] - el[2])
            c = np.linalg.norm(el[0] - el[1])
            R = a * b * c / (4.0 * area)
            r = 2.0 * area / (a + b + c)
            worst = max(worst, R / r)
        return float(worst)

    def element_keys(self):
        """Canonical keys (frozensets of wrapped vertices) for containment tests."""
        keys = []
        n = self.domain.n_side
        for el in self.elements:
            keys.append(frozenset((int(v[0]) % n, int(v[1]) % n) for v in el))
        return keys

    def check_conforming(self):
        """Every wrapped edge must be shared by exactly two elements."""
        from collections import Counter
        n = self.domain.n_side
        cnt = Counter()
        for el in self.elements:
            for i in range(3):
                a = tuple(np.mod(el[i], n))
                b = tuple(np.mod(el[(i + 1) % 3], n))
                cnt[frozenset((a, b))] += 1
        bad = {k: v for k, v in cnt.items() if v != 2}
        if bad:
            raise MeshError(f"non-conforming coarse mesh: {len(bad)} bad edges")

    def gradients(self, eval_at):
        """(n_el, k, 2) gradients of the P1 interpolant of point values.

        ``eval_at`` maps an (m, 2) integer index array to (m, k) values and
        must honor the element's unwrapped frame (PeriodicDeformation.eval_at
        does).
        """
        eps = self.domain.eps
        out = []
        for el in self.elements:
            Y = np.asarray(eval_at(el))
            B = np.stack([el[1] - el[0], el[2] - el[0]], axis=1).astype(float) * eps
            dY = np.stack([Y[1] - Y[0], Y[2] - Y[0]], axis=1)
            out.append(dY @ np.linalg.inv(B))
        return np.asarray(out)

    def lp_norm_of_gradients(self, grads, p):
        flat = np.abs(grads.reshape(len(grads), -1))
        if np.isinf(p):
            return float(flat.max())
        return float((self.areas() @ (flat ** p).sum(axis=1)) ** (1.0 / p))

    def sites_with_barycentrics(self):
        """Assign every lattice site to one containing element.

        Returns (owner, lam, local) where owner[site_flat] is an element id,
        lam the barycentric coordinates, and local the unwrapped integer
        site position in the owner's frame.
        """
        n = self.domain.n_side
        owner = np.full(n * n, -1, dtype=int)
        lam = np.zeros((n * n, 3))
        local = np.zeros((n * n, 2), dtype=int)
        for eid, el in enumerate(self.elements):
            v0, v1, v2 = (tuple(map(int, v)) for v in el)
            area2 = _cross(v0, v1, v2)
            sign = 1 if area2 > 0 else -1
            lo = el.min(axis=0)
            hi = el.max(axis=0)
            for px in range(int(lo[0]), int(hi[0]) + 1):
                for py in range(int(lo[1]), int(hi[1]) + 1):
                    p = (px, py)
                    w0 = sign * _cross(v1, v2, p)
                    w1 = sign * _cross(v2, v0, p)
                    w2 = sign * _cross(v0, v1, p)
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                    sflat = (px % n) * n + (py % n)
                    if owner[sflat] >= 0:
                        continue
                    owner[sflat] = eid
                    tot = float(abs(area2))
                    lam[sflat] = np.array([w0, w1, w2], dtype=float) / tot
                    local[sflat] = p
        if (owner < 0).any():
            raise MeshError("coarse mesh does not cover all lattice sites")
        return owner, lam, local


@dataclass
class CoarseField:
    """P1 deformation on a coarse mesh: strain plus values at wrapped vertices."""

    mesh: CoarseMesh
    A: np.ndarray
    vertex_u: dict  # wrapped vertex tuple -> displacement (d,)

    def eval_at(self, idx):
        idx = np.asarray(idx, dtype=int)
        n = self.mesh.domain.n_side
        eps = self.mesh.domain.eps
        single = idx.ndim == 1
        pts = idx[None, :] if single else idx
        vals = []
        for p in pts:
            key = (int(p[0]) % n, int(p[1]) % n)
            vals.append(eps * p @ self.A.T + self.vertex_u[key])
        out = np.asarray(vals)
        return out[0] if single else out

    @classmethod
    def from_deformation(cls, mesh, y):
        n = mesh.domain.n_side
        verts = {}
        for el in mesh.elements:
            for v in el:
                key = (int(v[0]) % n, int(v[1]) % n)
                if key not in verts:
                    verts[key] = y.u.at(np.asarray(key))
        return cls(mesh, y.A.copy(), verts)

    @classmethod
    def random(cls, mesh, rng, strain_scale=0.1, amplitude=0.3):
        n = mesh.domain.n_side
        d = mesh.domain.d
        A = np.eye(d) + strain_scale * rng.uniform(-1, 1, size=(d, d))
        verts = {}
        for el in mesh.elements:
            for v in el:
                key = (int(v[0]) % n, int(v[1]) % n)
                if key not in verts:
                    verts[key] = amplitude * rng.standard_normal(d)
        return cls(mesh, A, verts)

    def gradients(self):
        """(n_el, d, 2) element gradients; vertex values in the element frame."""
        return self.mesh.gradients(self.eval_at)

    def grad_lp_norm(self, p):
        return self.mesh.lp_norm_of_gradients(self.gradients(), p)


def interpolate_to_coarse(mesh: CoarseMesh, y) -> CoarseField:
    """Nodal interpolation I_h of a lattice deformation onto the coarse mesh."""
    return CoarseField.from_deformation(mesh, y)


def interpolate_to_fine(field: CoarseField) -> PeriodicDeformation:
    """Nodal interpolation I_eps of a coarse P1 deformation onto the lattice."""
    from .lattice import PeriodicNodalField
    dom = field.mesh.domain
    owner, lam, local = field.mesh.sites_with_barycentrics()
    n = dom.n_side
    vals = np.zeros((n * n, dom.d))
    for sflat in range(n * n):
        el = field.mesh.elements[owner[sflat]]
        Y = field.eval_at(el)
        vals[sflat] = lam[sflat] @ Y
    # subtract the affine part evaluated at each site's owner-frame position
    eps = dom.eps
    affine = eps * local @ field.A.T
    u = (vals - affine).reshape(n, n, dom.d)
    # reorder from (px % n) indexing to storage slots: they coincide
    return PeriodicDeformation(field.A, PeriodicNodalField(dom, u))


def uniform_coarse_mesh(domain: LatticeDomain, H):
    """Uniform coarse triangulation with spacing H (lattice units)."""
    H = int(H)
    if domain.n_side % H != 0:
        raise MeshError("H must divide the period 2N")
    N = domain.N
    els = []
    for ax in range(-N, N, H):
        for ay in range(-N, N, H):
            a = np.array([ax, ay])
            els.append([a, a + (H, 0), a + (H, H)])
            els.append([a, a + (H, H), a + (0, H)])
    mesh = CoarseMesh(domain, np.asarray(els))
    mesh.check_conforming()
    return mesh


def _transition_cell(anchor, h, fine_side):
    """Triangulate an h-cell with a midpoint vertex on the flagged fine side."""
    ax, ay = int(anchor[0]), int(anchor[1])
    m = h // 2

    def pt(x, y):
        return (ax + x, ay + y)

    c00, c10, c11, c01 = pt(0, 0), pt(h, 0), pt(h, h), pt(0, h)
    if fine_side == "-y":
        mid = pt(m, 0)
        return [(c00, mid, c01), (mid, c10, c11), (mid, c11, c01)]
    if fine_side == "+y":
        mid = pt(m, h)
        return [(c01, c00, mid), (mid, c00, c10), (mid, c10, c11)]
    if fine_side == "-x":
        mid = pt(0, m)
        return [(c00, c10, mid), (mid, c10, c11), (mid, c11, c01)]
    if fine_side == "+x":
        mid = pt(h, m)
        return [(c00, c10, mid), (c00, mid, c11), (c00, c11, c01)]
    raise MeshError(f"unsupported transition pattern {fine_side}")


def graded_block_mesh(domain: LatticeDomain, fine_halfwidth):
    """Graded lattice triangulation: fine block, then rings coarsening by 2.

    The block [-a, a]^2 (a = fine_halfwidth, even) carries the atomistic
    triangulation; successive square rings double the cell size, with a
    transition row along each ring's inner side (the ring corner cells touch
    the previous ring only at a point and stay plain).  Requires N = a 2^L.
    """
    N = domain.N
    a = int(fine_halfwidth)
    if a < 2 or a % 2 != 0:
        raise MeshError("fine_halfwidth must be an even integer >= 2")
    b = a
    while b < N:
        b *= 2
    if b != N:
        raise MeshError("need N = fine_halfwidth * 2^L for the ring construction")

    els = []
    for ax in range(-a, a):
        for ay in range(-a, a):
            p = (ax, ay)
            els.append((p, (ax + 1, ay), (ax + 1, ay + 1)))
            els.append((p, (ax + 1, ay + 1), (ax, ay + 1)))

    b = a
    s = 2
    while b < N:
        B = 2 * b
        rows = (B - b) // s
        for row in range(rows):
            r0 = b + row * s
            inner = row == 0
            for t in range(-r0 // s, r0 // s):
                x = t * s
                els += _pattern_or_plain((x, r0), s, "-y" if inner else None)
                els += _pattern_or_plain((x, -r0 - s), s, "+y" if inner else None)
                els += _pattern_or_plain((r0, x), s, "-x" if inner else None)
                els += _pattern_or_plain((-r0 - s, x), s, "+x" if inner else None)
            for anchor in ((r0, r0), (-r0 - s, r0), (r0, -r0 - s),
                           (-r0 - s, -r0 - s)):
                els += _pattern_or_plain(anchor, s, None)
        b = B
        s *= 2

    mesh = CoarseMesh(domain, np.asarray([[list(v) for v in el] for el in els]))
    mesh.check_conforming()
    return mesh


def _pattern_or_plain(anchor, h, fine_side):
    if fine_side:
        return _transition_cell(anchor, h, fine_side)
    ax, ay = int(anchor[0]), int(anchor[1])
    a = (ax, ay)
    return [(a, (ax + h, ay), (ax + h, ay + h)),
            (a, (ax + h, ay + h), (ax, ay + h))]


def fine_elements_of_coarse(coarse: CoarseMesh, fine: AtomisticMesh):
    """For each coarse element: list of (fine element id, overlap area in eps^2).

    Exact rational polygon clipping; plain containment is recognized fast.
    """
    eps2 = fine.domain.eps ** 2
    out = []
    keyset = _fine_key_lookup(fine)
    for el in coarse.elements:
        n = fine.domain.n_side
        key = frozenset((int(v[0]) % n, int(v[1]) % n) for v in el)
        if key in keyset:
            out.append([(keyset[key], 0.5 * eps2)])
            continue
        pieces = []
        lo = el.min(axis=0)
        hi = el.max(axis=0)
        tri = [tuple(map(int, v)) for v in el]
        for cx in range(int(lo[0]), int(hi[0])):
            for cy in range(int(lo[1]), int(hi[1])):
                for shape in (LOWER, UPPER):
                    ftri = [(cx + dx, cy + dy) for dx, dy in SHAPE_VERTS[shape]]
                    area = convex_clip_area(tri, ftri)
                    if area > 0:
                        sx, sy = cx % fine.n, cy % fine.n
                        pieces.append((fine.element_id(shape, sx, sy),
                                       float(area) * eps2))
        out.append(pieces)
    return out


def _fine_key_lookup(fine: AtomisticMesh):
    n = fine.domain.n_side
    lookup = {}
    for elem in range(fine.n_elements):
        verts = fine.element_vertices(elem)
        lookup[frozenset((int(v[0]) % n, int(v[1]) % n) for v in verts)] = elem
    return lookup


def convex_clip_area(subject, clip):
    """Exact overlap area (Fraction, grid units) of two convex integer polygons."""
    poly = [(Fraction(p[0]), Fraction(p[1])) for p in _hull(subject)]
    cl = _hull(clip)
    if _cross(cl[0], cl[1], cl[2]) < 0:
        cl = list(reversed(cl))
    for k in range(len(cl)):
        a, b = cl[k], cl[(k + 1) % len(cl)]
        new = []
        m = len(poly)
        if m == 0:
            return Fraction(0)
        for i in range(m):
            p, q = poly[i], poly[(i + 1) % m]
            sp = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
            sq = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
            if sp >= 0:
                new.append(p)
            if (sp > 0 > sq) or (sp < 0 < sq):
                t = sp / (sp - sq)
                new.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
        poly = new
    if len(poly) < 3:
        return Fraction(0)
    area = Fraction(0)
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        area += p[0] * q[1] - q[0] * p[1]
    return abs(area) / 2


def p1_stiffness(mesh: AtomisticMesh):
    """Sparse scalar stiffness matrix of the periodic P1 space on the mesh.

    Entries are sums of |T| grad(lam_a) . grad(lam_b); with the uniform
    right-triangle geometry the eps factors cancel exactly.
    """
    import scipy.sparse as sp
    n = mesh.n
    sites = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    for shape in (LOWER, UPPER):
        verts = SHAPE_VERTS[shape]
        grads = np.asarray(SHAPE_GRAD_LAMBDA[shape])
        for a in range(3):
            for b in range(3):
                va, vb = verts[a], verts[b]
                coef = 0.5 * float(grads[a] @ grads[b])
                if coef == 0.0:
                    continue
                ra = roll_get(sites, (va[0], va[1]))
                rb = roll_get(sites, (vb[0], vb[1]))
                rows.append(ra.reshape(-1))
                cols.append(rb.reshape(-1))
                vals.append(np.full(n * n, coef))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))


# ----------------------------------------------------------------------------
# CSV dumps
# ----------------------------------------------------------------------------

def dump_mesh_csv(mesh: AtomisticMesh, decomp, path):
    """Element vertex indices and labels, one row per element."""
    lbl = decomp.element_label_flat() if decomp is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "v0x", "v0y", "v1x", "v1y", "v2x", "v2y", "label"])
        for e in range(mesh.n_elements):
            verts = mesh.element_vertices(e).reshape(-1)
            row = [e] + [int(v) for v in verts]
            row.append(LABEL_NAMES[int(lbl[e])] if lbl is not None else "")
            w.writerow(row)
