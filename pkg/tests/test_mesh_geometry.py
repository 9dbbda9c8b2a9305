"""Mesh geometry: profiles, gradients, regions, neighborhoods, coarse meshes."""

from fractions import Fraction

import numpy as np
import pytest

from aclab.fields import smooth_deformation_2d
from aclab.lattice import (
    LatticeDomain,
    PeriodicDeformation,
    nearest_neighbor_stencil,
    nn_and_diagonal_stencil,
    random_displacement,
)
from aclab.mesh import (
    A_LBL,
    C_LBL,
    I_LBL,
    EDGE_D,
    EDGE_H,
    EDGE_V,
    LOWER,
    UPPER,
    AtomisticMesh,
    CoarseField,
    DecompositionError,
    MeshError,
    NeighborhoodTables,
    RegionDecomposition,
    SHAPE_VERTS,
    bond_chi_integral,
    bond_profile,
    convex_clip_area,
    discrete_gradient_norm,
    fine_elements_of_coarse,
    graded_block_mesh,
    interface_width,
    interpolate_to_coarse,
    interpolate_to_fine,
    oscillation,
    uniform_coarse_mesh,
)


@pytest.fixture
def mesh8():
    return AtomisticMesh(LatticeDomain(2, 8))


def block_decomp(mesh, stencil, a=2, w=2):
    return RegionDecomposition.from_block(mesh, stencil, a, w)


# -- bond profiles -----------------------------------------------------------

@pytest.mark.parametrize("r", [(1, 0), (0, 1), (1, 1), (2, 1), (-2, 1), (3, -2),
                               (2, 0), (-1, -1), (0, -3)])
def test_bond_profile_partitions_unity(r):
    prof = bond_profile(r)
    assert sum(length for _, length in prof.pieces) == Fraction(1)
    # endpoints are lattice vertices
    assert prof.points[0][0] == "vertex" and prof.points[-1][0] == "vertex"


def test_bond_profile_axis_bond_is_edge():
    prof = bond_profile((1, 0))
    assert len(prof.pieces) == 1
    key, length = prof.pieces[0]
    assert key == ("edge", EDGE_H, (0, 0)) and length == 1


def test_bond_profile_diagonal_bond_is_edge():
    prof = bond_profile((1, 1))
    assert prof.pieces == ((("edge", EDGE_D, (0, 0)), Fraction(1)),)


def test_bond_profile_knight_move():
    prof = bond_profile((2, 1))
    # crosses lower(0,0), then upper(1,0) after the midpoint
    keys = [key for key, _ in prof.pieces]
    assert ("el", LOWER, (0, 0)) in keys and ("el", UPPER, (1, 0)) in keys


# -- chi integrals for explicit triangles ------------------------------------

def test_chi_integral_edge_bond_is_half():
    tri = [(0, 0), (1, 0), (0, 1)]
    assert bond_chi_integral(tri, (0, 0), (1, 0)) == Fraction(1, 2)


def test_chi_integral_outside_touching_endpoint_is_zero():
    tri = [(0, 0), (1, 0), (0, 1)]
    assert bond_chi_integral(tri, (0, 0), (0, -1)) == 0


def test_chi_integral_through_interior():
    tri = [(0, 0), (2, 0), (0, 2)]
    # interior chord from (0,1) to (1,0): full weight
    assert bond_chi_integral(tri, (0, 1), (1, -1)) == Fraction(1)
    # bond along the hypotenuse: weight one half
    assert bond_chi_integral(tri, (0, 2), (2, -2)) == Fraction(1, 2)
    # bond overhanging the hypotenuse: half weight on the inside part only
    assert bond_chi_integral(tri, (0, 2), (4, -4)) == Fraction(1, 4)


# -- P1 gradients -------------------------------------------------------------

def test_p1_gradient_homogeneous(mesh8):
    A = np.array([[1.2, 0.3], [0.1, 0.8]])
    y = PeriodicDeformation.from_strain(mesh8.domain, A)
    g = mesh8.p1_gradient(y)
    assert np.max(np.abs(g.data - A)) == 0.0


def test_p1_gradient_norm_identity(mesh8):
    # L^p norm of the element gradients equals the nodal-difference form
    rng = np.random.default_rng(0)
    y = PeriodicDeformation(np.eye(2) + 0.1 * rng.uniform(-1, 1, (2, 2)),
                            random_displacement(mesh8.domain, rng=rng))
    g = mesh8.p1_gradient(y)
    for p in (1.0, 2.0, 4.0):
        assert g.lp_norm(p) == pytest.approx(discrete_gradient_norm(y, p), rel=1e-12)
    assert g.lp_norm(np.inf) == pytest.approx(
        discrete_gradient_norm(y, np.inf), rel=1e-12)


# -- oscillation --------------------------------------------------------------

def test_oscillation_affine_is_zero(mesh8):
    y = PeriodicDeformation.from_strain(mesh8.domain, np.eye(2))
    g = mesh8.p1_gradient(y)
    assert oscillation(g, range(mesh8.n_elements)) == 0.0


def test_oscillation_two_elements(mesh8):
    rng = np.random.default_rng(1)
    y = PeriodicDeformation(np.eye(2), random_displacement(mesh8.domain, rng=rng))
    g = mesh8.p1_gradient(y)
    e1 = mesh8.element_id(LOWER, 3, 3)
    e2 = mesh8.element_id(UPPER, 3, 3)
    expect = np.linalg.norm(g.at(e1) - g.at(e2)) / mesh8.domain.eps
    assert oscillation(g, [e1, e2]) == pytest.approx(expect)


def test_oscillation_empty_region_rejected(mesh8):
    y = PeriodicDeformation.from_strain(mesh8.domain, np.eye(2))
    with pytest.raises(MeshError):
        oscillation(mesh8.p1_gradient(y), [])


def test_oscillation_scaling_with_smoothness():
    dom = LatticeDomain(2, 16)
    mesh = AtomisticMesh(dom)
    y, hess_bound = smooth_deformation_2d(dom, np.eye(2), amps=(0.05, 0.03, 0.04, 0.02))
    g = mesh.p1_gradient(y)
    tables = NeighborhoodTables(mesh, nearest_neighbor_stencil(2))
    elem = mesh.element_id(LOWER, 5, 9)
    ids = tables.omega_a(elem)
    # diameter of the covering element set, in units of eps
    pts = np.concatenate([mesh.element_vertices(e) for e in ids])
    diam = max(np.linalg.norm(p - q) for p in pts for q in pts)
    osc = oscillation(g, ids)
    assert osc <= 1.1 * diam * hess_bound


# -- neighborhoods -------------------------------------------------------------

def test_omega_a_diameter_bound(mesh8):
    # for nearest neighbors the fattened patch has diameter <= diam(T) + 4 eps
    st = nearest_neighbor_stencil(2)
    from aclab.mesh import _hull, _omega_a_pattern
    offs = tuple(tuple(r) for r in st.offsets)
    for shape in (LOWER, UPPER):
        pts = []
        tri = SHAPE_VERTS[shape]
        for r1 in offs:
            for r2 in offs:
                for v in tri:
                    for a in (0, 1):
                        for b in (0, 1):
                            pts.append((v[0] + a * r1[0] + b * r2[0],
                                        v[1] + a * r1[1] + b * r2[1]))
        diam = max(np.hypot(p[0] - q[0], p[1] - q[1]) for p in pts for q in pts)
        assert diam <= np.sqrt(2.0) + 4.0 + 1e-12


def test_omega_empty_deep_in_atomistic(mesh8):
    st = nearest_neighbor_stencil(2)
    decomp = block_decomp(mesh8, st, a=4, w=2)
    tables = NeighborhoodTables(mesh8, st)
    center = mesh8.element_id(LOWER, 0, 0)  # cell anchored at the origin
    anchor = mesh8.cell_anchor(0, 0)
    assert tuple(anchor) == (0, 0)
    assert tables.omega(center, decomp).size == 0


def test_omega_contains_omega_c_in_continuum(mesh8):
    st = nearest_neighbor_stencil(2)
    decomp = block_decomp(mesh8, st, a=2, w=2)
    tables = NeighborhoodTables(mesh8, st)
    # element far from the interface
    elem = None
    for e in decomp.elements_with_label(C_LBL):
        verts = mesh8.element_vertices(e)
        if np.min(np.abs(verts)) >= 6:
            elem = int(e)
            break
    omega = set(tables.omega(elem, decomp))
    omega_c = set(tables.omega_c(elem, decomp))
    assert omega_c <= omega


# -- region decomposition -------------------------------------------------------

def shapely_regions(mesh, decomp):
    from shapely.geometry import Polygon
    from shapely.ops import unary_union
    polys = {A_LBL: [], I_LBL: [], C_LBL: []}
    n = mesh.n
    for e in range(mesh.n_elements):
        verts = mesh.element_vertices(e)
        lbl = int(decomp.element_label_flat()[e])
        for tx in (-n, 0, n):
            for ty in (-n, 0, n):
                polys[lbl].append(Polygon(verts + np.array([tx, ty])))
    return {k: unary_union(v) for k, v in polys.items()}


def test_derived_sets_match_shapely_oracle():
    from shapely.geometry import LineString
    dom = LatticeDomain(2, 6)
    mesh = AtomisticMesh(dom)
    st = nn_and_diagonal_stencil()
    decomp = block_decomp(mesh, st, a=1, w=2)
    regions = shapely_regions(mesh, decomp)
    ax = dom.axis_indexes()
    la = np.zeros((mesh.n, mesh.n), dtype=bool)
    bi = np.zeros((st.m, mesh.n, mesh.n), dtype=bool)
    for sx in range(mesh.n):
        for sy in range(mesh.n):
            x = np.array([ax[sx], ax[sy]])
            for k, r in enumerate(st.offsets):
                seg = LineString([tuple(x), tuple(x + np.array(r))])
                if regions[A_LBL].intersects(seg):
                    la[sx, sy] = True
                if regions[I_LBL].covers(seg):
                    bi[k, sx, sy] = True
    assert np.array_equal(la, decomp.la_mask)
    assert np.array_equal(bi, decomp.bi_mask)


def test_validation_passes_for_wide_interface(mesh8):
    st = nn_and_diagonal_stencil()
    decomp = block_decomp(mesh8, st, a=2, w=2)
    decomp.validate()


def test_validation_rejects_thin_interface():
    dom = LatticeDomain(2, 8)
    mesh = AtomisticMesh(dom)
    st = nn_and_diagonal_stencil()
    decomp = RegionDecomposition.from_block(mesh, st, 2, 1)
    with pytest.raises(DecompositionError):
        decomp.validate()


def test_interior_a_connected(mesh8):
    st = nearest_neighbor_stencil(2)
    decomp = block_decomp(mesh8, st, a=2, w=2)
    assert decomp.interior_a_connected()
    # two separated blocks are not connected
    labels = decomp.labels.copy()
    labels[:, :, :] = C_LBL
    labels[:, 2:4, 2:4] = A_LBL
    labels[:, 10:12, 10:12] = A_LBL
    labels[:, 1:5, 1:5][labels[:, 1:5, 1:5] == C_LBL] = I_LBL
    labels[:, 9:13, 9:13][labels[:, 9:13, 9:13] == C_LBL] = I_LBL
    split = RegionDecomposition(mesh8, labels, st)
    assert not split.interior_a_connected()


# -- interface width -------------------------------------------------------------

def networkx_width_oracle(mesh, decomp):
    import networkx as nx
    G = nx.Graph()
    mids = {EDGE_H: np.array([0.5, 0.0]), EDGE_V: np.array([0.0, 0.5]),
            EDGE_D: np.array([0.5, 0.5])}
    from aclab.mesh import SHAPE_EDGES
    eps = mesh.domain.eps
    for elem in range(mesh.n_elements):
        shape, sx, sy = mesh.element_of_id(elem)
        eids, pos = [], []
        for kind, (dx, dy) in SHAPE_EDGES[shape]:
            cx, cy = mesh.wrap_cell((sx + dx, sy + dy))
            eids.append(mesh.edge_id(kind, cx, cy))
            pos.append(mids[kind] + np.array([dx, dy]))
        for i in range(3):
            for j in range(i + 1, 3):
                w = eps * float(np.linalg.norm(pos[i] - pos[j]))
                if G.has_edge(eids[i], eids[j]):
                    w = min(w, G[eids[i]][eids[j]]["weight"])
                G.add_edge(eids[i], eids[j], weight=w)
    has_a = decomp.edge_has(A_LBL).reshape(-1)
    has_i = decomp.edge_has(I_LBL).reshape(-1)
    source = "virtual"
    for e in np.flatnonzero(has_a):
        G.add_edge(source, int(e), weight=0.0)
    dist = nx.single_source_dijkstra_path_length(G, source, weight="weight")
    return max(dist[int(e)] for e in np.flatnonzero(has_i)) / eps


def test_interface_width_matches_oracle(mesh8):
    st = nearest_neighbor_stencil(2)
    decomp = block_decomp(mesh8, st, a=2, w=1)
    got = interface_width(decomp)
    expect = networkx_width_oracle(mesh8, decomp)
    assert got == pytest.approx(expect, rel=1e-12)


def test_interface_width_monotone_in_ring(mesh8):
    st = nearest_neighbor_stencil(2)
    w1 = interface_width(block_decomp(mesh8, st, a=2, w=1))
    w2 = interface_width(block_decomp(mesh8, st, a=2, w=2))
    assert w2 > w1


def test_interface_width_requires_atomistic(mesh8):
    st = nearest_neighbor_stencil(2)
    decomp = RegionDecomposition.all_continuum(mesh8, st)
    with pytest.raises(DecompositionError):
        interface_width(decomp)


def test_interface_edge_next_to_atomistic(mesh8):
    # an interface edge in the same element as an atomistic edge contributes
    # the single-segment midpoint distance
    st = nearest_neighbor_stencil(2)
    decomp = block_decomp(mesh8, st, a=2, w=1)
    got = interface_width(decomp)
    assert got > 0.0


# -- coarse meshes ---------------------------------------------------------------

def test_uniform_coarse_mesh_roundtrip():
    dom = LatticeDomain(2, 8)
    coarse = uniform_coarse_mesh(dom, 4)
    assert coarse.n_elements == 2 * (16 // 4) ** 2
    assert coarse.shape_regularity() < 3.0


def test_graded_mesh_conforms_and_covers():
    dom = LatticeDomain(2, 16)
    coarse = graded_block_mesh(dom, 4)
    assert coarse.shape_regularity() < 8.0
    # fine zone elements literally belong to the atomistic triangulation
    mesh = AtomisticMesh(dom)
    from aclab.mesh import _fine_key_lookup
    fine_keys = _fine_key_lookup(mesh)
    keys = coarse.element_keys()
    inside = [k for k, el in zip(keys, coarse.elements)
              if np.max(np.abs(el)) <= 4]
    assert inside and all(k in fine_keys for k in inside)


def test_interpolation_reproduces_affine():
    dom = LatticeDomain(2, 8)
    coarse = uniform_coarse_mesh(dom, 4)
    A = np.array([[1.1, 0.2], [0.4, 0.9]])
    y = PeriodicDeformation.from_strain(dom, A)
    yh = interpolate_to_coarse(coarse, y)
    yfine = interpolate_to_fine(yh)
    assert np.max(np.abs(yfine.A - A)) < 1e-14
    assert np.max(np.abs(yfine.u.values)) < 1e-12


def test_interpolants_agree_at_shared_sites():
    dom = LatticeDomain(2, 8)
    coarse = uniform_coarse_mesh(dom, 2)
    rng = np.random.default_rng(3)
    y = PeriodicDeformation(np.eye(2), random_displacement(dom, rng=rng))
    yh = interpolate_to_coarse(coarse, y)
    yfine = interpolate_to_fine(yh)
    for el in coarse.elements[:8]:
        for v in el:
            got = yfine.eval_at(np.asarray(v))
            expect = yh.eval_at(np.asarray(v))
            assert np.max(np.abs(got - expect)) < 1e-12


@pytest.mark.parametrize("builder", ["uniform", "graded"])
def test_fine_interpolation_norm_inequality(builder):
    # |grad I_eps y_h|_p <= |grad y_h|_p for coarse piecewise affine fields
    dom = LatticeDomain(2, 16)
    mesh = AtomisticMesh(dom)
    if builder == "uniform":
        coarse = uniform_coarse_mesh(dom, 8)
    else:
        coarse = graded_block_mesh(dom, 4)
    rng = np.random.default_rng(11)
    for _ in range(5):
        field = CoarseField.random(coarse, rng)
        yf = interpolate_to_fine(field)
        gf = mesh.p1_gradient(yf)
        for p in (1.0, 2.0, 4.0, np.inf):
            assert gf.lp_norm(p) <= field.grad_lp_norm(p) * (1 + 1e-12)


def test_overlap_area_identity():
    # clipping a triangle against itself returns its area
    tri = [(0, 0), (4, 1), (1, 3)]
    assert convex_clip_area(tri, tri) == Fraction(11, 2)


def test_fine_coarse_overlap_partitions_fine_area():
    dom = LatticeDomain(2, 8)
    coarse = graded_block_mesh(dom, 4)
    fine = AtomisticMesh(dom)
    over = fine_elements_of_coarse(coarse, fine)
    total = sum(a for pieces in over for _, a in pieces)
    assert total == pytest.approx(dom.volume, rel=1e-12)
