"""From optimized normal unknowns to final oriented unit normals.

The optimization yields a reference field n_hat whose signs encode a
globally consistent (inward) orientation.  Final normals come either from
locally fitted unoriented normals sign-flipped against n_hat, or from
n_hat itself normalized; on large inputs only a representative subset is
optimized and the remaining points inherit the sign of their nearest
representative.  All emitted normals use the outward convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

SOURCE_FITTED = "flipped_fitted"
SOURCE_OPTIMIZED = "optimized_normalized"


@dataclass
class OrientationResult:
    normals: np.ndarray          # (N, 3) unit, outward
    source: np.ndarray           # (N,) source label per point
    rep_indices: np.ndarray | None = None
    degenerate_fit: np.ndarray | None = None

    def __post_init__(self):
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("orientation result normals must be unit length")


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its first nonzero component is positive."""
    v = vectors.copy()
    sign = np.ones(len(v))
    decided = np.zeros(len(v), dtype=bool)
    for a in range(3):
        live = ~decided & (v[:, a] != 0.0)
        sign[live] = np.sign(v[live, a])
        decided |= v[:, a] != 0.0
    return v * sign[:, None]


def estimate_unoriented(cloud, graph):
    """PCA plane-fit normals with arbitrary but deterministic sign.

    Each point's covariance is taken over itself plus its symmetrized
    neighbors; the normal is the least-variance eigenvector.  Neighborhoods
    of rank < 2 fall back to the global least-variance direction and are
    flagged.  Returns (normals, degenerate mask).
    """
    pos = cloud.positions
    n = len(pos)
    counts = np.array([len(nb) + 1 for nb in graph.neighbors], dtype=float)
    members_i = np.concatenate(
        [np.full(len(nb) + 1, i) for i, nb in enumerate(graph.neighbors)])
    members_j = np.concatenate(
        [np.append(nb, i) for i, nb in enumerate(graph.neighbors)])

    sums = np.zeros((n, 3))
    np.add.at(sums, members_i, pos[members_j])
    outer = pos[members_j, :, None] * pos[members_j, None, :]
    prods = np.zeros((n, 3, 3))
    np.add.at(prods, members_i, outer)
    mean = sums / counts[:, None]
    cov = prods - counts[:, None, None] * mean[:, :, None] * mean[:, None, :]

    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    # rank < 2: the mid eigenvalue vanishes relative to the spread
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale

    if degenerate.any():
        centered = pos - pos.mean(axis=0)
        _, gvec = np.linalg.eigh(centered.T @ centered)
        normals[degenerate] = gvec[:, 0]

    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return _canonical_sign(normals), degenerate


def flip_by_reference(n_tilde: np.ndarray, n_hat: np.ndarray) -> np.ndarray:
    """Keep each fitted normal when it agrees with the reference, else flip.

    Agreement is a nonnegative dot product; the result follows the
    reference field's (inward) convention.
    """
    if n_tilde.shape != n_hat.shape:
        raise ValueError("normal arrays must have equal shapes")
    dots = np.einsum("ij,ij->i", n_tilde, n_hat)
    sign = np.where(dots >= 0.0, 1.0, -1.0)
    return n_tilde * sign[:, None]


def use_optimized(n_hat: np.ndarray, fallback: np.ndarray):
    """Normalized reference normals; near-zero rows take the fallback.

    Returns (normals, fallback mask).
    """
    norms = np.linalg.norm(n_hat, axis=1)
    bad = norms < 1e-12
    out = np.empty_like(n_hat)
    out[~bad] = n_hat[~bad] / norms[~bad, None]
    out[bad] = fallback[bad]
    return out, bad


def subsample_representatives(cloud, fraction: float | None = None,
                              count: int | None = None, seed: int = 0) -> np.ndarray:
    """Uniform random subset of point indices, sorted, reproducible."""
    n = len(cloud)
    if count is None:
        if fraction is None:
            raise ValueError("give either fraction or count")
        count = int(round(fraction * n))
    if not 0 < count <= n:
        raise ValueError(f"representative count must be in [1, {n}], got {count}")
    if count == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def _nearest_representative(rep_pos: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Nearest representative per query point, exact lower-index tie-break."""
    n_rep = len(rep_pos)
    tree = cKDTree(rep_pos)
    k = min(4, n_rep)
    out = np.empty(len(query), dtype=np.int64)
    rows = np.arange(len(query))
    while True:
        _, idx = tree.query(query[rows], k=k)
        idx = np.atleast_2d(idx.reshape(len(rows), k))
        d2 = ((query[rows, None, :] - rep_pos[idx]) ** 2).sum(axis=2)
        best = d2.min(axis=1)
        picked = np.where(d2 <= best[:, None], idx, n_rep).min(axis=1)
        out[rows] = picked
        if k >= n_rep:
            break
        unsettled = d2[:, -1] <= best  # every candidate tied: widen
        if not unsettled.any():
            break
        rows = rows[unsettled]
        k = min(n_rep, 4 * k)
    return out


def propagate_from_representatives(cloud, rep_indices: np.ndarray,
                                   rep_normals: np.ndarray,
                                   fitted: np.ndarray) -> np.ndarray:
    """Sign-fix every point's fitted normal against its nearest representative.

    Representatives keep their oriented normals; other points keep their
    fitted normal when it agrees with the nearest representative's normal
    (nonnegative dot product) and flip otherwise.
    """
    if len(rep_indices) == 0:
        raise ValueError("empty representative set")
    rep_indices = np.asarray(rep_indices)
    nearest = _nearest_representative(cloud.positions[rep_indices],
                                      cloud.positions)
    out = flip_by_reference(fitted, rep_normals[nearest])
    out[rep_indices] = rep_normals
    return out


def orientation_accuracy(normals: np.ndarray, gt_normals: np.ndarray) -> dict:
    """Fraction of points whose normal strictly agrees with ground truth."""
    if gt_normals is None:
        raise ValueError("ground-truth normals are required")
    if normals.shape != gt_normals.shape:
        raise ValueError("normal arrays must have equal shapes")
    dots = np.einsum("ij,ij->i", normals, gt_normals)
    correct = int(np.count_nonzero(dots > 0.0))
    n = len(normals)
    acc = correct / n
    return {"accuracy": acc, "n_points": n, "n_correct": correct,
            "over_97": bool(acc > 0.97), "over_90": bool(acc > 0.90)}
