"""Discrete stress fields: element-wise tensors representing first variations.

The atomistic stress distributes each bond's covector over the elements the
bond crosses, weighted by the exact characteristic-function integrals; the
coupled stress combines the atomistic rule near the core, the Cauchy-Born
stress in the continuum, and interface-bond contributions with full weight
on the interface boundary.  Both satisfy

    <dE(y), z> = sum_T |T| Sigma(y; T) : grad z(T)

exactly (up to roundoff), which the tests assert against the assembled
forces.
"""

from __future__ import annotations

import csv
from functools import lru_cache

import numpy as np

from .lattice import PeriodicDeformation, roll_get
from .mesh import (
    A_LBL,
    C_LBL,
    I_LBL,
    EDGE_INCIDENT,
    AtomisticMesh,
    P0TensorField,
    RegionDecomposition,
    bond_profile,
)
from .potentials import cauchy_born_dW


@lru_cache(maxsize=None)
def _stress_pattern(r):
    """Relative element weights of a bond with offset r.

    Returns a tuple of ((shape, (cx, cy)), weight) pairs: the chi-integral of
    the bond anchored at the origin against the element at relative cell c.
    Edge pieces contribute half to each incident element.
    """
    prof = bond_profile(r)
    acc = {}
    for key, length in prof.pieces:
        if key[0] == "el":
            sh, c = key[1], key[2]
            acc[(sh, c)] = acc.get((sh, c), 0) + length
        else:
            kind, c = key[1], key[2]
            for sh2, (dx, dy) in EDGE_INCIDENT[kind]:
                cc = (c[0] + dx, c[1] + dy)
                acc[(sh2, cc)] = acc.get((sh2, cc), 0) + length / 2
    return tuple(sorted((k, float(v)) for k, v in acc.items()))


def sigma_atomistic(V, y: PeriodicDeformation, mesh: AtomisticMesh):
    """Atomistic stress: bond covectors spread by exact chi integrals."""
    dom = mesh.domain
    if dom.d != 2:
        raise ValueError("the 2D stress assembly needs a 2D domain")
    P = V.partials(y.stencil_diffs(V.stencil))
    n = mesh.n
    data = np.zeros((2, n, n, 2, 2))
    inv_area = 1.0 / mesh.element_area  # eps^2 / |T| = 2
    for k, r in enumerate(V.stencil.offsets):
        Pk = P[..., k, :]
        rvec = np.asarray(r, dtype=float)
        for (sh, c), w in _stress_pattern(tuple(r)):
            # element at cell s receives the bond anchored at s - c
            Pq = roll_get(Pk, (-c[0], -c[1]), naxes=2)
            data[sh] += (dom.eps ** 2 * inv_area * w) * \
                Pq[..., :, None] * rvec[None, None, None, :]
    return P0TensorField(mesh, data)


def interface_bond_weights(decomp: RegionDecomposition, bond):
    """Distribution of an interface bond over interface elements.

    Weights follow the boundary-modified characteristic function: interior
    pieces belong to their element, edge pieces split half/half between two
    interface elements, and pieces on the interface boundary carry full
    weight on the interface side.  For bonds inside the interface region the
    weights partition the bond measure.
    """
    mesh = decomp.mesh
    n = mesh.n
    labels = decomp.labels
    boundary = decomp.edge_on_interface_boundary()
    k, sx, sy = bond
    r = decomp.stencil.offsets[k]
    out = []
    for key, length in bond_profile(tuple(r)).pieces:
        if key[0] == "el":
            sh, (cx, cy) = key[1], key[2]
            ex, ey = (sx + cx) % n, (sy + cy) % n
            if labels[sh, ex, ey] == I_LBL:
                out.append((mesh.element_id(sh, ex, ey), float(length)))
        else:
            kind, (cx, cy) = key[1], key[2]
            ex, ey = (sx + cx) % n, (sy + cy) % n
            w = 1.0 if boundary[kind, ex, ey] else 0.5
            for sh2, (dx, dy) in EDGE_INCIDENT[kind]:
                tx, ty = (ex + dx) % n, (ey + dy) % n
                if labels[sh2, tx, ty] == I_LBL:
                    out.append((mesh.element_id(sh2, tx, ty),
                                w * float(length)))
    return out


def sigma_coupled(V, interface, y, decomp: RegionDecomposition):
    """Coupled stress: atomistic / Cauchy-Born / interface three-way assembly."""
    mesh = decomp.mesh
    dom = mesh.domain
    labels = decomp.labels
    n = mesh.n

    data = np.zeros((2, n, n, 2, 2))

    # continuum elements carry the Cauchy-Born stress of the local gradient
    G = mesh.p1_gradient(y)
    S_cb = cauchy_born_dW(V, G.data)
    cmask = labels == C_LBL
    data[cmask] = S_cb[cmask]

    # atomistic elements carry the full atomistic stress
    sig_a = sigma_atomistic(V, y, mesh)
    amask = labels == A_LBL
    data[amask] = sig_a.data[amask]

    # interface elements: interacting-site bonds with plain chi weights
    P = V.partials(y.stencil_diffs(V.stencil))
    la = decomp.la_mask
    inv_area = 1.0 / mesh.element_area
    imask = labels == I_LBL
    for k, r in enumerate(V.stencil.offsets):
        Pk = P[..., k, :] * la[..., None]
        rvec = np.asarray(r, dtype=float)
        for (sh, c), w in _stress_pattern(tuple(r)):
            Pq = roll_get(Pk, (-c[0], -c[1]), naxes=2)
            contrib = (dom.eps ** 2 * inv_area * w) * \
                Pq[..., :, None] * rvec[None, None, None, :]
            data[sh][imask[sh]] += contrib[imask[sh]]

    # interface bonds with the boundary-modified characteristic function
    bp = interface.bond_partials(y)
    flat = data.reshape(-1, 2, 2)
    for bond, p in zip(interface.bonds, bp):
        rvec = np.asarray(interface.stencil.offsets[bond[0]], dtype=float)
        for elem, w in interface_bond_weights(decomp, bond):
            flat[elem] += (dom.eps ** 2 * inv_area * w) * np.outer(p, rvec)
    return P0TensorField(mesh, data)


def mean_stress(sigma: P0TensorField):
    """Area-weighted average of an element-wise stress field."""
    return sigma.mean()


def representation_residual(E, y, z, sigma: P0TensorField, mesh: AtomisticMesh):
    """|<dE(y), z> - sum_T |T| Sigma : grad z(T)| for one test direction."""
    from .energy import variation
    lhs = variation(E, y, z)
    gz = mesh.p1_gradient(z if isinstance(z, PeriodicDeformation) else z)
    rhs = mesh.element_area * float(np.sum(sigma.data * gz.data))
    return abs(lhs - rhs), abs(lhs) + abs(rhs)


# ----------------------------------------------------------------------------
# 1D reductions
# ----------------------------------------------------------------------------

def sigma_atomistic_1d(pair, y):
    """Per-interval stress: <dE_a(y), u> = eps sum_n sigma_n u'_n."""
    p = -y.diff((-1,))[..., 0]
    pn = roll_get(p, (1,))
    pp = roll_get(p, (-1,))
    return pair.phi1.df(p) + pair.phi2.df(p + pn) + pair.phi2.df(pp + p)


def sigma_qnl_1d(E_qnl, y):
    """Per-interval stress of the 1D quasinonlocal energy."""
    return E_qnl._prime_gradient(y)


def dump_stress_csv(sigma: P0TensorField, path):
    mesh = sigma.mesh
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "s11", "s12", "s21", "s22"])
        for e in range(mesh.n_elements):
            s = sigma.at(e)
            w.writerow([e, s[0, 0], s[0, 1], s[1, 0], s[1, 1]])
