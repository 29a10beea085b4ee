"""Sparse operator assembly for the joint indicator/normal optimization.

Builds the density weights, the splat operator S (normals to vector-field
basis coefficients), the stiffness A, the divergence G with the composed
B = G @ S, the point-evaluation operator U, the local-consistency quadratic
M, and the Dirichlet boundary elimination.

Galerkin entries are separable: each 3D inner product is a product of 1D
integrals that depend only on the depth difference and the relative offset
between the two nodes, so assembly runs as a handful of vectorized passes
per depth pair over precomputed 1D tables.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .bspline import Basis1D, bspline_value, inner_1d

TINY = 1e-14

_STENCIL_27 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
_WINDOW_5 = np.array(
    [(sx, sy, sz) for sx in range(-2, 3) for sy in range(-2, 3) for sz in range(-2, 3)],
    dtype=np.int64,
)


def drop_tiny(mat: sp.spmatrix, tol: float = TINY) -> sp.csr_matrix:
    """Remove stored entries below tol in magnitude."""
    mat = mat.tocsr()
    mat.sum_duplicates()
    mat.data[np.abs(mat.data) < tol] = 0.0
    mat.eliminate_zeros()
    return mat


def write_matrix_coo(path: str, mat: sp.spmatrix):
    """Dump a sparse matrix as `row col value` text for cross-checking."""
    coo = mat.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as f:
        f.write(f"# shape {mat.shape[0]} {mat.shape[1]} nnz {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write(f"{r} {c} {v:.17g}\n")


@lru_cache(maxsize=None)
def _pair_tables(delta: int):
    """Dimensionless 1D integral tables for a coarse/fine depth gap.

    Indexed by m - m0 where m = i_fine - i_coarse * 2^delta; the range
    covers every overlapping configuration.  Values are for unit coarse
    width; actual widths rescale val_val by w and der_der by 1/w while
    der_val is width-free.
    """
    m0 = -((1 << delta) + 1)
    m1 = 2 << delta
    coarse = Basis1D(0, 0)
    vv = np.empty(m1 - m0 + 1)
    dd = np.empty(m1 - m0 + 1)
    dvc = np.empty(m1 - m0 + 1)  # derivative on the coarse factor
    for m in range(m0, m1 + 1):
        fine = Basis1D(delta, m)
        vv[m - m0] = inner_1d(coarse, fine, "val_val")
        dd[m - m0] = inner_1d(coarse, fine, "der_der")
        dvc[m - m0] = inner_1d(coarse, fine, "der_val")
    return m0, vv, dd, dvc


def _overlap_pairs(tree, d_coarse: int, d_fine: int):
    """Yield (coarse ids, fine ids, m offsets) for support-overlapping pairs."""
    fine_ids = tree.level_ids(d_fine)
    if len(fine_ids) == 0:
        return
    delta = d_fine - d_coarse
    cf = tree.coords[fine_ids]
    base = cf >> delta
    f = cf - (base << delta)
    m0, _, _, _ = _pair_tables(delta)
    m1 = 2 << delta
    for s in _WINDOW_5:
        m = f - (s << delta)
        ok = np.all((m >= m0) & (m <= m1), axis=1)
        if not ok.any():
            continue
        rows = np.flatnonzero(ok)
        coarse_ids = tree.lookup(d_coarse, base[rows] + s)
        hit = coarse_ids >= 0
        if not hit.any():
            continue
        rows = rows[hit]
        yield coarse_ids[hit], fine_ids[rows], m[rows]


def assemble_stiffness(tree) -> sp.csr_matrix:
    """Gradient-gradient Galerkin matrix over every node pair."""
    n = tree.n_nodes
    r_parts, c_parts, v_parts = [], [], []
    for dc in range(tree.max_depth + 1):
        w1 = 2.0 ** (-dc)
        for df in range(dc, tree.max_depth + 1):
            m0, vv, dd, _ = _pair_tables(df - dc)
            for ci, fi, m in _overlap_pairs(tree, dc, df):
                vx, vy, vz = vv[m[:, 0] - m0], vv[m[:, 1] - m0], vv[m[:, 2] - m0]
                dx, dy, dz = dd[m[:, 0] - m0], dd[m[:, 1] - m0], dd[m[:, 2] - m0]
                val = w1 * (dx * vy * vz + vx * dy * vz + vx * vy * dz)
                r_parts.append(ci)
                c_parts.append(fi)
                v_parts.append(val)
                if df > dc:
                    r_parts.append(fi)
                    c_parts.append(ci)
                    v_parts.append(val)
    rows = np.concatenate(r_parts)
    cols = np.concatenate(c_parts)
    vals = np.concatenate(v_parts)
    return drop_tiny(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))


def _divergence_parts(tree):
    """Per-axis scalar matrices D_a[i, o] = <d_a B_i, B_o> for max-depth o."""
    n = tree.n_nodes
    d_max = tree.max_depth
    parts = []
    for axis in range(3):
        parts.append(([], [], []))
    for dc in range(d_max + 1):
        w1 = 2.0 ** (-dc)
        m0, vv, _, dvc = _pair_tables(d_max - dc)
        for ci, fi, m in _overlap_pairs(tree, dc, d_max):
            v = [vv[m[:, a] - m0] for a in range(3)]
            dv = [dvc[m[:, a] - m0] for a in range(3)]
            for axis in range(3):
                others = [a for a in range(3) if a != axis]
                val = w1 * w1 * dv[axis] * v[others[0]] * v[others[1]]
                parts[axis][0].append(ci)
                parts[axis][1].append(fi)
                parts[axis][2].append(val)
    out = []
    for rows, cols, vals in parts:
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        out.append(drop_tiny(mat))
    return out


def interleave_columns(blocks) -> sp.csr_matrix:
    """Stack [Mx, My, Mz] so column 3*j+a comes from block a's column j."""
    n = blocks[0].shape[1]
    stacked = sp.hstack(blocks, format="csc")
    pos = np.arange(3 * n)
    order = (pos % 3) * n + pos // 3
    return stacked[:, order].tocsr()


def assemble_divergence(tree) -> sp.csr_matrix:
    """Divergence operator G mapping vector-field coefficients to <grad B_i, V>.

    Shape n_nodes x 3*n_nodes with columns interleaved per axis; only
    max-depth columns carry entries since splatting targets only max-depth
    nodes.
    """
    return interleave_columns(_divergence_parts(tree))


def compute_density(cloud, tree, density_depth: int | None = None) -> np.ndarray:
    """Local sampling density per point.

    Every sample deposits unit mass onto the surrounding node centers at the
    density depth (max_depth - 2 by default) with trilinear weights; the
    accumulated node masses are interpolated back at each sample.
    """
    dw = max(0, tree.max_depth - 2) if density_depth is None else density_depth
    res = 1 << dw
    u = cloud.positions * res - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base

    n = len(cloud.positions)
    corner_ids = np.empty((8, n), dtype=np.int64)
    corner_w = np.empty((8, n))
    for c in range(8):
        off = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1], dtype=np.int64)
        corner_ids[c] = tree.lookup(dw, base + off)
        wxyz = np.where(off[None, :] == 1, frac, 1.0 - frac)
        corner_w[c] = wxyz.prod(axis=1)

    mass = np.zeros(tree.n_nodes)
    for c in range(8):
        ok = corner_ids[c] >= 0
        np.add.at(mass, corner_ids[c][ok], corner_w[c][ok])

    dens = np.zeros(n)
    for c in range(8):
        ok = corner_ids[c] >= 0
        dens[ok] += corner_w[c][ok] * mass[corner_ids[c][ok]]
    return dens


def _splat_scalar(cloud, tree, weights: np.ndarray) -> sp.csr_matrix:
    d = tree.max_depth
    res = 1 << d
    pos = cloud.positions
    n = len(pos)
    cells = np.minimum((pos * res).astype(np.int64), res - 1)
    inv_w = 1.0 / weights

    rows, cols, vals = [], [], []
    for off in _STENCIL_27:
        targ = cells + off
        in_domain = np.all((targ >= 0) & (targ < res), axis=1)
        ids = tree.lookup(d, targ)
        if np.any(in_domain & (ids < 0)):
            raise RuntimeError("splat stencil node missing from octree")
        ok = in_domain
        u = pos[ok] * res - targ[ok] - 0.5
        alpha = bspline_value(u).prod(axis=1)
        rows.append(ids[ok])
        cols.append(np.flatnonzero(ok))
        vals.append(alpha * inv_w[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(tree.n_nodes, n),
    )
    return drop_tiny(mat)


def assemble_splat(cloud, tree, weights: np.ndarray) -> sp.csr_matrix:
    """Splat operator S (3*n_nodes x 3N): v = S n gives the vector-field
    coefficients of the density-normalized normal splat."""
    s0 = _splat_scalar(cloud, tree, weights)
    return sp.kron(s0, sp.identity(3, format="csr"), format="csr")


def assemble_point_eval(cloud, tree) -> sp.csr_matrix:
    """U[i, j] = basis of node j evaluated at sample i, all depths."""
    pos = cloud.positions
    n = len(pos)
    rows, cols, vals = [], [], []
    for d in range(tree.max_depth + 1):
        res = 1 << d
        cells = np.minimum((pos * res).astype(np.int64), res - 1)
        for off in _STENCIL_27:
            targ = cells + off
            ids = tree.lookup(d, targ)
            ok = ids >= 0
            if not ok.any():
                continue
            u = pos[ok] * res - targ[ok] - 0.5
            rows.append(np.flatnonzero(ok))
            cols.append(ids[ok])
            vals.append(bspline_value(u).prod(axis=1))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, tree.n_nodes),
    )
    return drop_tiny(mat)


def edge_weights(cloud, graph, wij_squared: bool = False) -> np.ndarray:
    """Per-edge Gaussian-style weights from the graph scale rho."""
    pos = cloud.positions
    diff = pos[graph.edges[:, 1]] - pos[graph.edges[:, 0]]
    lengths = np.linalg.norm(diff, axis=1)
    bad = np.flatnonzero(lengths <= 0.0)
    if len(bad):
        i, j = graph.edges[bad[0]]
        raise ValueError(f"coincident points on edge ({i}, {j})")
    arg = lengths ** 2 if wij_squared else lengths
    return np.exp(-arg / graph.rho ** 2)


def assemble_consistency(cloud, graph, wij_squared: bool = False) -> sp.csr_matrix:
    """Local-consistency quadratic M with n^T M n = E_D + E_COD.

    Per undirected edge (after summing both directions of the neighbor
    sums): the direction-difference part adds +w I3 on both diagonal blocks
    and -w I3 off-diagonal; the coupled-orthogonality part adds 2w e e^T on
    all four blocks, e being the unit edge vector.
    """
    pos = cloud.positions
    w = edge_weights(cloud, graph, wij_squared)
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    diff = pos[j] - pos[i]
    e = diff / np.linalg.norm(diff, axis=1, keepdims=True)

    n3 = 3 * len(pos)
    rows, cols, vals = [], [], []

    # direction difference: w * ||n_i - n_j||^2
    ax = np.arange(3)
    for bi, bj, sign in ((i, i, 1.0), (j, j, 1.0), (i, j, -1.0), (j, i, -1.0)):
        rows.append((3 * bi[:, None] + ax).ravel())
        cols.append((3 * bj[:, None] + ax).ravel())
        vals.append(np.repeat(sign * w, 3))

    # coupled orthogonality: 2w * [(n_i + n_j) . e]^2
    block = 2.0 * w[:, None, None] * e[:, :, None] * e[:, None, :]
    ra = np.repeat(ax, 3)
    ca = np.tile(ax, 3)
    flat = block.reshape(len(w), 9)
    for bi, bj in ((i, i), (i, j), (j, i), (j, j)):
        rows.append((3 * bi[:, None] + ra).ravel())
        cols.append((3 * bj[:, None] + ca).ravel())
        vals.append(flat.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n3, n3),
    )
    return drop_tiny(mat)


@dataclass
class SystemOperators:
    """Sparse operators of the block system, before or after boundary
    elimination (free_map is None before)."""

    U: sp.csr_matrix            # N x n_free point evaluation
    A: sp.csr_matrix            # n_free x n_free stiffness
    B: sp.csr_matrix            # n_free x 3N divergence of the splat
    M: sp.csr_matrix            # 3N x 3N local consistency
    alpha: float
    beta: float
    gamma: float
    free_map: np.ndarray | None = None   # full node id -> reduced column, -1 boundary
    free_ids: np.ndarray | None = None

    def __post_init__(self):
        self._Ut = self.U.T.tocsr()
        self._Bt = self.B.T.tocsr()

    @property
    def n_points(self) -> int:
        return self.U.shape[0]

    @property
    def dim_x(self) -> int:
        return self.U.shape[1]

    @property
    def dim_n(self) -> int:
        return self.M.shape[0]

    def nnz_report(self) -> dict:
        return {"U": int(self.U.nnz), "A": int(self.A.nnz),
                "B": int(self.B.nnz), "M": int(self.M.nnz)}


def eliminate_boundary(ops: SystemOperators, tree) -> SystemOperators:
    """Pin boundary-basis coefficients to zero by removing the matching
    columns of U, rows and columns of A, and rows of B."""
    free = tree.free_ids
    if len(free) == 0:
        raise ValueError("every octree node touches the boundary; "
                         "increase the depth or padding")
    free_map = np.full(tree.n_nodes, -1, dtype=np.int64)
    free_map[free] = np.arange(len(free))
    u_r = ops.U.tocsc()[:, free].tocsr()
    a_r = ops.A.tocsc()[:, free].tocsr()[free]
    b_r = ops.B[free]
    return SystemOperators(U=u_r, A=a_r, B=b_r, M=ops.M,
                           alpha=ops.alpha, beta=ops.beta, gamma=ops.gamma,
                           free_map=free_map, free_ids=free)


def build_system(cloud, tree, graph, *, alpha: float, beta: float, gamma: float,
                 wij_squared: bool = False, density_depth: int | None = None):
    """Assemble every operator and eliminate the boundary.

    Returns (reduced SystemOperators, info dict with densities and nnz of
    the full operators).
    """
    dens = compute_density(cloud, tree, density_depth)
    s0 = _splat_scalar(cloud, tree, dens)
    a_full = assemble_stiffness(tree)
    gx, gy, gz = _divergence_parts(tree)
    b_full = drop_tiny(interleave_columns([gx @ s0, gy @ s0, gz @ s0]))
    u_full = assemble_point_eval(cloud, tree)
    m = assemble_consistency(cloud, graph, wij_squared=wij_squared)

    full = SystemOperators(U=u_full, A=a_full, B=b_full, M=m,
                           alpha=alpha, beta=beta, gamma=gamma)
    info = {"density": dens, "nnz_full": full.nnz_report(),
            "n_nodes": tree.n_nodes, "n_boundary": int(tree.is_boundary.sum())}
    ops = eliminate_boundary(full, tree)
    info["nnz"] = ops.nnz_report()
    return ops, info
