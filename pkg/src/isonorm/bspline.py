"""Tensor-product quadratic B-spline basis algebra on dyadic octree grids.

Every octree node at depth d and integer grid coordinate i carries a
cardinal quadratic B-spline scaled to the node width 2^-d and centered at
the node center (i + 0.5) * 2^-d.  This module provides point evaluation,
gradients, and exact inner-product integrals of basis pairs, which are the
building blocks of all Galerkin operators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npp

# Cardinal quadratic B-spline: one quadratic per knot interval, coefficients
# [c0, c1, c2] in the local variable u; support is (-3/2, 3/2).
KNOTS = np.array([-1.5, -0.5, 0.5, 1.5])
PIECES = np.array([
    [9.0 / 8.0, 1.5, 0.5],    # (u + 3/2)^2 / 2      on [-3/2, -1/2]
    [0.75, 0.0, -1.0],        # 3/4 - u^2            on [-1/2,  1/2]
    [9.0 / 8.0, -1.5, 0.5],   # (3/2 - u)^2 / 2      on [ 1/2,  3/2]
])

SUPPORT_RADIUS = 1.5


@dataclass(frozen=True)
class Basis1D:
    """One axis factor of a node basis: depth and integer grid offset."""

    depth: int
    offset: int

    @property
    def width(self) -> float:
        return 2.0 ** (-self.depth)

    @property
    def center(self) -> float:
        return (self.offset + 0.5) * self.width

    @property
    def support(self) -> tuple[float, float]:
        w = self.width
        c = self.center
        return (c - SUPPORT_RADIUS * w, c + SUPPORT_RADIUS * w)


def bspline_value(u):
    """Cardinal quadratic B-spline b(u)."""
    u = np.asarray(u, dtype=float)
    au = np.abs(u)
    inner = 0.75 - u * u
    outer = 0.5 * (1.5 - au) ** 2
    return np.where(au <= 0.5, inner, np.where(au < 1.5, outer, 0.0))


def bspline_deriv(u):
    """Derivative b'(u) of the cardinal quadratic B-spline."""
    u = np.asarray(u, dtype=float)
    au = np.abs(u)
    inner = -2.0 * u
    outer = np.sign(u) * (au - 1.5)
    return np.where(au <= 0.5, inner, np.where(au < 1.5, outer, 0.0))


def eval_1d(basis: Basis1D, t):
    """Value of the scaled basis at coordinate t."""
    return bspline_value((np.asarray(t, dtype=float) - basis.center) / basis.width)


def deriv_1d(basis: Basis1D, t):
    """d/dt of the scaled basis at coordinate t."""
    w = basis.width
    return bspline_deriv((np.asarray(t, dtype=float) - basis.center) / w) / w


def eval_3d(depth: int, ijk, q):
    """Tensor-product basis value of node (depth, ijk) at points q.

    ijk and q broadcast against each other on the leading axes; the last
    axis holds the three spatial components.
    """
    w = 2.0 ** (-depth)
    ijk = np.asarray(ijk, dtype=float)
    q = np.asarray(q, dtype=float)
    u = q / w - ijk - 0.5
    return np.prod(bspline_value(u), axis=-1)


def grad_3d(depth: int, ijk, q):
    """Gradient of the tensor-product basis of node (depth, ijk) at q."""
    w = 2.0 ** (-depth)
    ijk = np.asarray(ijk, dtype=float)
    q = np.asarray(q, dtype=float)
    u = q / w - ijk - 0.5
    vals = bspline_value(u)
    ders = bspline_deriv(u) / w
    out = np.empty(u.shape, dtype=float)
    for a in range(3):
        axes = [vals[..., 0], vals[..., 1], vals[..., 2]]
        axes[a] = ders[..., a]
        out[..., a] = axes[0] * axes[1] * axes[2]
    return out


def _compose_affine(coeffs, s: float, r: float):
    # coefficients of p(s*u + r) for quadratic p
    c0, c1, c2 = coeffs
    return np.array([
        c0 + c1 * r + c2 * r * r,
        c1 * s + 2.0 * c2 * s * r,
        c2 * s * s,
    ])


def inner_1d(a: Basis1D, b: Basis1D, mode: str) -> float:
    """Exact integral over R of a product of two (possibly differentiated) bases.

    mode selects the integrand: "val_val" is a*b, "der_der" is a'*b', and
    "der_val" is a'*b (derivative on the first argument).  The product is
    integrated piecewise; both factors are expressed as polynomials in the
    finer basis's local coordinate, where all coefficients stay O(1), so the
    result is exact to machine precision at any depth combination.
    """
    if mode not in ("val_val", "der_der", "der_val"):
        raise ValueError(f"unknown inner product mode {mode!r}")
    lo = max(a.support[0], b.support[0])
    hi = min(a.support[1], b.support[1])
    if lo >= hi:
        return 0.0

    if a.width <= b.width:
        fine, coarse = a, b
        der_fine = mode in ("der_der", "der_val")   # derivative lands on a
        der_coarse = mode == "der_der"
    else:
        fine, coarse = b, a
        der_fine = mode == "der_der"
        der_coarse = mode in ("der_der", "der_val")

    fw, fc = fine.width, fine.center
    # coarse local coordinate as a function of the fine one: uc = s*uf + r
    s = fw / coarse.width
    r = (fc - coarse.center) / coarse.width

    u_lo = (lo - fc) / fw
    u_hi = (hi - fc) / fw
    coarse_knots = (KNOTS - r) / s
    breaks = np.concatenate([KNOTS, coarse_knots])
    breaks = np.unique(np.clip(breaks, u_lo, u_hi))

    total = 0.0
    for u0, u1 in zip(breaks[:-1], breaks[1:]):
        if u1 <= u0:
            continue
        um = 0.5 * (u0 + u1)
        pf = PIECES[np.searchsorted(KNOTS, um) - 1]
        pc = _compose_affine(PIECES[np.searchsorted(KNOTS, s * um + r) - 1], s, r)
        if der_fine:
            pf = npp.polyder(pf)
        if der_coarse:
            pc = npp.polyder(pc)
        prim = npp.polyint(npp.polymul(pf, pc))
        total += npp.polyval(u1, prim) - npp.polyval(u0, prim)

    # du = dt/fw; each derivative taken in u contributes another 1/fw
    n_der = int(der_fine) + int(der_coarse)
    return float(total * fw ** (1 - n_der))
