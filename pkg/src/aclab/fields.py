"""Smooth periodic test deformations with analytic derivative data.

These families keep the sup of the second derivatives available in closed
form, so oscillation and consistency bounds can be checked against exact
quantities instead of numerically differentiated ones.
"""

from __future__ import annotations

import numpy as np

from .lattice import LatticeDomain, PeriodicNodalField, PeriodicDeformation


def smooth_deformation_1d(domain, A=1.0, a=0.05, b=0.0, phase=0.0):
    """y(x) = A x + a sin(pi x + phase) + b (1 - cos(pi x))."""
    x = domain.coords()[..., 0]
    u = a * np.sin(np.pi * x + phase) + b * (1.0 - np.cos(np.pi * x))
    fld = PeriodicNodalField(domain, u[..., None])
    return PeriodicDeformation(np.array([[float(A)]]), fld)


def smooth_deformation_2d(domain, A=None, amps=(0.04, 0.03, 0.03, 0.02),
                          phases=(0.0, 0.0, 0.0, 0.0)):
    """Trigonometric periodic displacement on top of a homogeneous strain.

    u1 = a0 sin(pi x1 + p0) + a1 sin(pi x1 + p1) cos(pi x2)
    u2 = a2 sin(pi x2 + p2) cos(pi x1) + a3 sin(pi x2 + p3)

    Returns (deformation, hess_bound) where hess_bound >= sup |D^2 u| in the
    Frobenius norm (used to sanity-check oscillation scaling).
    """
    if A is None:
        A = np.eye(2)
    a0, a1, a2, a3 = amps
    p0, p1, p2, p3 = phases
    xy = domain.coords()
    x1, x2 = xy[..., 0], xy[..., 1]
    u1 = a0 * np.sin(np.pi * x1 + p0) + a1 * np.sin(np.pi * x1 + p1) * np.cos(np.pi * x2)
    u2 = a2 * np.sin(np.pi * x2 + p2) * np.cos(np.pi * x1) + a3 * np.sin(np.pi * x2 + p3)
    u = np.stack([u1, u2], axis=-1)
    fld = PeriodicNodalField(domain, u)
    # per-component Hessians: |D^2 u1| <= pi^2 (|a0| + 2|a1|) entrywise bound etc.
    h1 = np.pi ** 2 * (abs(a0) + 2.0 * abs(a1))
    h2 = np.pi ** 2 * (abs(a2) * 2.0 + abs(a3))
    hess_bound = float(np.hypot(h1, h2))
    return PeriodicDeformation(np.asarray(A, dtype=float), fld), hess_bound


def random_smooth_deformation_2d(domain, rng, strain_scale=0.05, amp=0.03):
    """Random member of the smooth 2D family, strains near the identity."""
    A = np.eye(2) + strain_scale * rng.uniform(-1, 1, size=(2, 2))
    amps = amp * rng.uniform(0.3, 1.0, size=4)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    y, hb = smooth_deformation_2d(domain, A, tuple(amps), tuple(phases))
    return y, hb


def random_smooth_deformation_1d(domain, rng, strain_center=1.0,
                                 strain_scale=0.1, amp=0.05):
    A = strain_center + strain_scale * rng.uniform(-1, 1)
    a = amp * rng.uniform(0.3, 1.0)
    b = amp * rng.uniform(0.0, 0.5)
    return smooth_deformation_1d(domain, A, a, b, phase=rng.uniform(0, 2 * np.pi))


def row_pinned_deformation_2d(domain, A=None, amp=0.05, drift=0.05):
    """Smooth deformation that is exactly affine on the row x2 = -1/2.

    u1 = [amp sin(pi x1) + drift (1 - cos(pi x1))] (1 + sin(pi x2)) and
    u2 = 0, so u vanishes identically where sin(pi x2) = -1.
    """
    if A is None:
        A = np.eye(2)
    xy = domain.coords()
    x1, x2 = xy[..., 0], xy[..., 1]
    profile = amp * np.sin(np.pi * x1) + drift * (1.0 - np.cos(np.pi * x1))
    u1 = profile * (1.0 + np.sin(np.pi * x2))
    u = np.stack([u1, np.zeros_like(u1)], axis=-1)
    return PeriodicDeformation(np.asarray(A, dtype=float),
                               PeriodicNodalField(domain, u))
