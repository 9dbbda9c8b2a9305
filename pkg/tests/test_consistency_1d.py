"""1D consistency: exact dual norms, split-coupling bounds, sharpness."""

import numpy as np
import pytest

from aclab.fields import random_smooth_deformation_1d, smooth_deformation_1d
from aclab.lattice import LatticeDomain, PeriodicDeformation, random_displacement
from aclab.energy import AtomisticEnergy, CellCutoutEnergy, ForceFunctional, QnlEnergy1D
from aclab.consistency import (
    ConsistencyError,
    dual_norm_1d,
    qce_sharpness_1d,
    qnl_consistency_1d,
    qnl_residual_coefficients,
)
from tests.test_energy import pair_1d


def test_dual_norm_zero_functional():
    dom = LatticeDomain(1, 16)
    phi = ForceFunctional(dom, np.zeros(dom.shape + (1,)))
    for p in (1, 2, np.inf):
        assert dual_norm_1d(phi, p) == 0.0


def test_dual_norm_rejects_nonzero_mean():
    dom = LatticeDomain(1, 16)
    phi = ForceFunctional(dom, np.ones(dom.shape + (1,)))
    with pytest.raises(ConsistencyError):
        dual_norm_1d(phi, 2)


def test_dual_norm_constant_stress_is_zero():
    # a functional represented by a constant interval stress annihilates
    # every periodic test function
    dom = LatticeDomain(1, 16)
    sigma = 1.7 * np.ones(dom.n_side)
    f = (sigma - np.roll(sigma, -1))[:, None]
    phi = ForceFunctional(dom, f)
    for p in (1, 2, np.inf):
        assert dual_norm_1d(phi, p) <= 1e-14


def test_dual_norm_matches_dense_oracle_p2():
    # brute-force oracle: maximize f.u / |u'|_2 over a full basis
    dom = LatticeDomain(1, 6)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(dom.n_side)
    f -= f.mean()
    phi = ForceFunctional(dom, f[:, None])
    got = dual_norm_1d(phi, 2)

    n = dom.n_side
    D = np.zeros((n, n))
    for i in range(n):
        D[i, i] = 1.0 / dom.eps
        D[i, (i - 1) % n] = -1.0 / dom.eps
    K = dom.eps * D.T @ D
    Kp = np.linalg.pinv(K)
    expect = float(np.sqrt(f @ Kp @ f))
    assert got == pytest.approx(expect, rel=1e-10)


def test_qnl_residual_table_matches_variation():
    dom = LatticeDomain(1, 32)
    pair = pair_1d()
    K = 8
    E_at = AtomisticEnergy(pair, dom)
    E_qnl = QnlEnergy1D(pair, dom, K)
    rng = np.random.default_rng(1)
    y = random_smooth_deformation_1d(dom, rng)
    u = random_displacement(dom, k=1, rng=rng, amplitude=0.4)
    lhs = (E_at.force(y) - E_qnl.force(y)).pair(u)
    R = qnl_residual_coefficients(pair, dom, y, K)
    up = -u.diff((-1,))[..., 0]
    assert lhs == pytest.approx(dom.eps * float(np.sum(R * up)), rel=1e-11)
    # residual vanishes on the identical rows
    idx = dom.axis_indexes()
    assert np.max(np.abs(R[(idx >= -K + 1) & (idx <= K)])) == 0.0


def test_qnl_consistency_bound_homogeneous():
    dom = LatticeDomain(1, 64)
    pair = pair_1d()
    y = PeriodicDeformation.from_strain(dom, np.array([[1.2]]))
    rep = qnl_consistency_1d(pair, dom, y, K=16, p=2)
    assert rep.lhs <= 1e-13 and rep.rhs <= 1e-13


@pytest.mark.parametrize("p", [1, 2, np.inf])
@pytest.mark.parametrize("N", [32, 64, 128])
def test_qnl_consistency_bound_smooth(N, p):
    dom = LatticeDomain(1, N)
    pair = pair_1d()
    y = smooth_deformation_1d(dom, 1.0, 0.08, 0.05, phase=0.7)
    rep = qnl_consistency_1d(pair, dom, y, K=N // 4, p=p)
    assert rep.verdict, (rep.lhs, rep.rhs)
    assert rep.interval_bound_violation <= 1e-12


def test_qnl_second_order_away_from_interface():
    # with curvature supported away from the interface rows, only the
    # second-order continuum terms remain
    dom = LatticeDomain(1, 128)
    pair = pair_1d()
    K = dom.N // 4
    # bump localized near x = 1 (far from the interface at |x| ~ K eps)
    x = dom.coords()[..., 0]
    u = 0.05 * np.exp(-18.0 * (1.0 - np.cos(np.pi * (x - 1.0))))
    y = PeriodicDeformation(
        np.array([[1.0]]),
        __import__("aclab.lattice", fromlist=["_"]).PeriodicNodalField(
            dom, u[:, None]))
    rep = qnl_consistency_1d(pair, dom, y, K=K, p=2)
    assert rep.rhs_terms[0] <= 1e-12  # interface rows see no curvature
    assert rep.lhs <= rep.rhs


@pytest.mark.parametrize("p", [1, 2, np.inf])
def test_qce_sharpness(p):
    dom = LatticeDomain(1, 128)
    pair = pair_1d()
    rep = qce_sharpness_1d(pair, dom, A=1.15, K=dom.N // 4, p=p)
    assert rep.test_function_value == pytest.approx(rep.proof_value, abs=1e-10)
    assert rep.bracket, (rep.exact_norm, rep.proof_value)


def test_qce_sharpness_p2_exact_value():
    # at p=2 the exact dual norm equals the proof's lower bound
    dom = LatticeDomain(1, 64)
    pair = pair_1d()
    A = 1.1
    rep = qce_sharpness_1d(pair, dom, A=A, K=16, p=2)
    g = abs(pair.phi2.df(2 * A))
    assert rep.proof_value == pytest.approx(np.sqrt(dom.eps) * g, rel=1e-12)
    assert rep.exact_norm == pytest.approx(rep.proof_value, rel=1e-10)


def test_qce_sharpness_zero_ghost_when_flat():
    # quadratic second-neighbor term vanishing at 2A kills the ghost force
    from aclab.potentials import PairPotential1D, harmonic_scalar, quartic_scalar
    dom = LatticeDomain(1, 32)
    pair = PairPotential1D(harmonic_scalar(1.0), quartic_scalar(0.0, 0.0))
    rep = qce_sharpness_1d(pair, dom, A=0.9, K=8, p=2)
    assert rep.exact_norm <= 1e-13 and rep.proof_value == 0.0
