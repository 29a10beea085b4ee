"""Independent reference implementations used to freeze expected values.

Everything here recomputes results along a different path than the library:
Gauss-Legendre quadrature instead of analytic polynomial integration,
all-pairs scans instead of kd-trees, a naive recursive octree builder, the
energy formulas written out directly, and dense matrix algebra for the
block system.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.polynomial.legendre import leggauss

from isonorm.bspline import KNOTS, Basis1D, deriv_1d, eval_1d

_GL_X, _GL_W = leggauss(24)


def quad_inner_1d(a: Basis1D, b: Basis1D, mode: str) -> float:
    """Gauss-Legendre quadrature of the 1D basis-product integral."""
    lo = max(a.support[0], b.support[0])
    hi = min(a.support[1], b.support[1])
    if lo >= hi:
        return 0.0
    knots = np.concatenate([a.center + KNOTS * a.width,
                            b.center + KNOTS * b.width])
    knots = np.unique(np.clip(knots, lo, hi))
    total = 0.0
    for t0, t1 in zip(knots[:-1], knots[1:]):
        if t1 <= t0:
            continue
        t = 0.5 * (t1 - t0) * _GL_X + 0.5 * (t1 + t0)
        fa = deriv_1d(a, t) if mode in ("der_der", "der_val") else eval_1d(a, t)
        fb = deriv_1d(b, t) if mode == "der_der" else eval_1d(b, t)
        total += 0.5 * (t1 - t0) * np.sum(_GL_W * fa * fb)
    return float(total)


def quad_stiffness_entry(tree, i: int, j: int) -> float:
    """3D quadrature of <grad B_i, grad B_j> via separable 1D integrals."""
    di, dj = int(tree.depths[i]), int(tree.depths[j])
    total = 0.0
    for axis in range(3):
        term = 1.0
        for a in range(3):
            bi = Basis1D(di, int(tree.coords[i, a]))
            bj = Basis1D(dj, int(tree.coords[j, a]))
            mode = "der_der" if a == axis else "val_val"
            term *= quad_inner_1d(bi, bj, mode)
        total += term
    return total


def quad_divergence_entry(tree, i: int, o: int, axis: int) -> float:
    """3D quadrature of <d_axis B_i, B_o>."""
    di, do = int(tree.depths[i]), int(tree.depths[o])
    term = 1.0
    for a in range(3):
        bi = Basis1D(di, int(tree.coords[i, a]))
        bo = Basis1D(do, int(tree.coords[o, a]))
        mode = "der_val" if a == axis else "val_val"
        term *= quad_inner_1d(bi, bo, mode)
    return term


def brute_force_knn(positions: np.ndarray, k: int) -> np.ndarray:
    """All-pairs kNN with (squared distance, index) ordering."""
    n = len(positions)
    d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand = [j for j in range(n) if j != i]
        cand.sort(key=lambda j: (d2[i, j], j))
        out[i] = cand[:k]
    return out


def naive_octree_nodes(positions: np.ndarray, max_depth: int,
                       full_depth: int = 2) -> set:
    """Recursive reference construction of the node set (depth, ix, iy, iz)."""
    nodes: set = set()

    def add_with_ancestors(d, ijk):
        while d >= 0:
            nodes.add((d, ijk[0], ijk[1], ijk[2]))
            ijk = tuple(c // 2 for c in ijk)
            d -= 1

    for d in range(min(full_depth, max_depth) + 1):
        res = 1 << d
        for ijk in itertools.product(range(res), repeat=3):
            nodes.add((d,) + ijk)

    for p in positions:
        for d in range(0, max_depth + 1):
            res = 1 << d
            cell = tuple(min(int(c * res), res - 1) for c in p)
            for off in itertools.product((-1, 0, 1), repeat=3):
                tgt = tuple(cell[a] + off[a] for a in range(3))
                if all(0 <= t < res for t in tgt):
                    add_with_ancestors(d, tgt)
    return nodes


def direct_field_value(tree, cloud, weights, normals, q: np.ndarray) -> np.ndarray:
    """Vector field at q straight from the per-point splat definition."""
    from isonorm.bspline import eval_3d

    d = tree.max_depth
    res = 1 << d
    val = np.zeros(3)
    for i, p in enumerate(cloud.positions):
        cell = np.minimum((p * res).astype(np.int64), res - 1)
        acc = 0.0
        for off in itertools.product((-1, 0, 1), repeat=3):
            tgt = cell + np.array(off)
            if np.any(tgt < 0) or np.any(tgt >= res):
                continue
            alpha = eval_3d(d, tgt, p)
            acc += alpha * eval_3d(d, tgt, q)
        val += acc / weights[i] * normals[i]
    return val


def direct_consistency_energy(positions: np.ndarray, graph, normals: np.ndarray,
                              wij_squared: bool = False) -> float:
    """E_D + E_COD written out as the double neighbor sums."""
    rho = graph.rho
    e_d = 0.0
    e_cod = 0.0
    for i, nbrs in enumerate(graph.neighbors):
        for j in nbrs:
            d = np.linalg.norm(positions[i] - positions[j])
            w = np.exp(-((d ** 2 if wij_squared else d) / rho ** 2))
            e_d += 0.5 * w * np.sum((normals[i] - normals[j]) ** 2)
            e = (positions[j] - positions[i]) / d
            e_cod += w * float((normals[i] + normals[j]) @ e) ** 2
    return e_d + e_cod


def dense_block_system(ops):
    """Materialized block operator and right-hand side of the reduced system."""
    u = ops.U.toarray()
    a = ops.A.toarray()
    b = ops.B.toarray()
    m = ops.M.toarray()
    al, be, ga = ops.alpha, ops.beta, ops.gamma
    top = np.hstack([u.T @ u + al * (a.T @ a), -al * (a.T @ b)])
    bot = np.hstack([-al * (b.T @ a), al * (b.T @ b) + be * m + ga * np.eye(m.shape[0])])
    mat = np.vstack([top, bot])
    vec = np.concatenate([u.T @ np.full(u.shape[0], 0.5), np.zeros(m.shape[0])])
    return mat, vec
