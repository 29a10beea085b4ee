"""Point-cloud ingestion, normalization, KNN graph, and synthetic shapes."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class ParseError(ValueError):
    """Malformed point-cloud file."""


@dataclass(frozen=True)
class PointCloud:
    """Sample positions plus optional ground-truth normals.

    transform is the affine map (scale, translation) taking the original
    world coordinates into the stored positions: q = scale * p + translation.
    It is the identity until normalize() is applied.
    """

    positions: np.ndarray
    gt_normals: np.ndarray | None = None
    transform: tuple[float, np.ndarray] = (1.0, None)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) == 0:
            raise ValueError("positions must be a nonempty (N, 3) array")
        object.__setattr__(self, "positions", pos)
        if self.gt_normals is not None:
            gn = np.ascontiguousarray(self.gt_normals, dtype=float)
            if gn.shape != pos.shape:
                raise ValueError("gt_normals must match positions shape")
            object.__setattr__(self, "gt_normals", gn)
        s, t = self.transform
        t = np.zeros(3) if t is None else np.asarray(t, dtype=float)
        if not s > 0:
            raise ValueError("transform scale must be positive")
        object.__setattr__(self, "transform", (float(s), t))

    def __len__(self) -> int:
        return len(self.positions)

    def to_world(self, q: np.ndarray) -> np.ndarray:
        """Map coordinates from the cloud's current frame back to world."""
        s, t = self.transform
        return (np.asarray(q, dtype=float) - t) / s


@dataclass(frozen=True)
class KnnGraph:
    """Symmetrized k-nearest-neighbor graph of a cloud."""

    k: int
    edges: np.ndarray                      # (E, 2) unique pairs, i < j
    neighbors: list = field(repr=False)    # per-point sorted neighbor ids
    rho: float                             # max edge length / 2


def _parse_rows(path: str, rows: list[tuple[int, str]], need: int = 3):
    pos, nrm = [], []
    for lineno, text in rows:
        parts = text.split()
        if len(parts) < need or (len(parts) > 3 and len(parts) < 6):
            raise ParseError(f"{path}:{lineno}: expected 3 or 6 numbers, got {len(parts)}")
        try:
            vals = [float(v) for v in parts[:6]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})") from None
        pos.append(vals[:3])
        if len(parts) >= 6:
            nrm.append(vals[3:6])
    if nrm and len(nrm) != len(pos):
        raise ParseError(f"{path}: normals present on some lines but not all")
    return pos, nrm


def _unit_normals(path: str, nrm: list, linenos) -> np.ndarray:
    arr = np.asarray(nrm, dtype=float)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if len(bad):
        raise ParseError(f"{path}:{linenos[bad[0]]}: zero-length normal")
    return arr / norms[:, None]


def _load_xyz(path: str) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                rows.append((lineno, text))
    if not rows:
        raise ParseError(f"{path}: no points")
    pos, nrm = _parse_rows(path, rows)
    gt = _unit_normals(path, nrm, [r[0] for r in rows]) if nrm else None
    return PointCloud(np.asarray(pos), gt)


def _load_ply(path: str) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: not a ply file")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_at = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError(f"{path}:{i}: only ascii ply is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ParseError(f"{path}:{i}: list property in vertex element")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i
            break
    if n_vertex is None or body_at is None:
        raise ParseError(f"{path}: missing vertex element or end_header")
    for name in ("x", "y", "z"):
        if name not in props:
            raise ParseError(f"{path}: vertex element lacks property {name}")
    if body_at + n_vertex > len(lines):
        raise ParseError(f"{path}: truncated: {n_vertex} vertices declared")
    if n_vertex == 0:
        raise ParseError(f"{path}: no points")

    data = np.empty((n_vertex, len(props)), dtype=float)
    for r in range(n_vertex):
        lineno = body_at + 1 + r
        parts = lines[body_at + r].split()
        if len(parts) != len(props):
            raise ParseError(f"{path}:{lineno}: expected {len(props)} values, got {len(parts)}")
        try:
            data[r] = [float(v) for v in parts]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})") from None

    col = {name: j for j, name in enumerate(props)}
    pos = data[:, [col["x"], col["y"], col["z"]]]
    gt = None
    if all(n in col for n in ("nx", "ny", "nz")):
        raw = data[:, [col["nx"], col["ny"], col["nz"]]]
        gt = _unit_normals(path, raw, np.arange(body_at + 1, body_at + 1 + n_vertex))
    return PointCloud(pos, gt)


def load_cloud(path: str, fmt: str | None = None) -> PointCloud:
    """Load a cloud from an xyz or ply file; normals become gt_normals."""
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".").lower() or "xyz"
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt == "ply":
        return _load_ply(path)
    raise ValueError(f"unknown format {fmt!r}")


def write_xyz(path: str, positions: np.ndarray, normals: np.ndarray | None = None):
    with open(path, "w") as f:
        for i, p in enumerate(positions):
            if normals is None:
                f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")
            else:
                n = normals[i]
                f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g} "
                        f"{n[0]:.10g} {n[1]:.10g} {n[2]:.10g}\n")


def write_ply(path: str, positions: np.ndarray, normals: np.ndarray | None = None):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(positions)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            f.write("property float nx\nproperty float ny\nproperty float nz\n")
        f.write("end_header\n")
        for i, p in enumerate(positions):
            if normals is None:
                f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")
            else:
                n = normals[i]
                f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g} "
                        f"{n[0]:.10g} {n[1]:.10g} {n[2]:.10g}\n")


def normalize(cloud: PointCloud, padding: float = 1.25) -> PointCloud:
    """Scale and center the cloud into the unit cube with a boundary margin.

    The tight bounding box is scaled by 1 / (padding * max_extent) and
    centered at (0.5, 0.5, 0.5); applying normalize twice is the identity up
    to roundoff.
    """
    if padding <= 1.0:
        raise ValueError("padding must exceed 1")
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("degenerate cloud: all points coincide")
    s = 1.0 / (padding * extent)
    center = 0.5 * (lo + hi)
    t = 0.5 - s * center
    pos = cloud.positions * s + t

    s0, t0 = cloud.transform
    return PointCloud(pos, cloud.gt_normals, (s * s0, s * t0 + t))


def build_knn_graph(cloud: PointCloud, k: int = 10, workers: int = 1) -> KnnGraph:
    """Symmetrized kNN graph; distance ties broken toward the lower index."""
    pos = cloud.positions
    n = len(pos)
    if n < 2:
        raise ValueError("need at least 2 points for a kNN graph")
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")

    tree = cKDTree(pos)
    kq = min(n - 1, k + 4)
    while True:
        _, idx = tree.query(pos, k=kq + 1, workers=workers)
        idx = np.atleast_2d(idx)
        # drop self, re-rank by exact squared distance with index tie-break
        keep = idx != np.arange(n)[:, None]
        extra = np.flatnonzero(keep.sum(axis=1) == idx.shape[1])
        keep[extra, -1] = False   # self absent among equidistant duplicates
        cand = idx[keep].reshape(n, -1)
        d2 = ((pos[:, None, :] - pos[cand]) ** 2).sum(axis=2)
        order = np.lexsort((cand, d2), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        if kq >= n - 1 or not np.any(d2[:, -1] <= d2[:, k - 1]):
            break
        kq = min(n - 1, 2 * kq)   # boundary ties: widen the candidate pool
    knn = cand[:, :k]

    a = np.repeat(np.arange(n), k)
    b = knn.ravel()
    pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    edges = np.unique(pairs, axis=0)

    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.argsort(both[:, 0], kind="stable")
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=n)
    splits = np.cumsum(counts)[:-1]
    neighbors = [np.sort(chunk) for chunk in np.split(both[:, 1], splits)]

    lengths = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
    return KnnGraph(k=k, edges=edges, neighbors=neighbors, rho=float(lengths.max()) / 2.0)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n: int, radius: float):
    if radius <= 0:
        raise ValueError("radius must be positive")
    dirs = rng.normal(size=(n, 3))
    norms = np.linalg.norm(dirs, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        dirs[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(dirs, axis=1)
    dirs /= norms[:, None]
    return dirs * radius, dirs.copy()


def _sample_torus(rng, n: int, major: float, minor: float):
    if major <= 0 or minor <= 0 or minor >= major:
        raise ValueError("torus needs 0 < minor < major")
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    done = 0
    while done < n:
        m = 2 * (n - done) + 16
        theta = rng.uniform(0.0, 2.0 * np.pi, m)
        phi = rng.uniform(0.0, 2.0 * np.pi, m)
        accept = rng.uniform(0.0, 1.0, m) < (major + minor * np.cos(phi)) / (major + minor)
        theta, phi = theta[accept], phi[accept]
        take = min(len(theta), n - done)
        theta, phi = theta[:take], phi[:take]
        ring = major + minor * np.cos(phi)
        pts[done:done + take, 0] = ring * np.cos(theta)
        pts[done:done + take, 1] = ring * np.sin(theta)
        pts[done:done + take, 2] = minor * np.sin(phi)
        nrm[done:done + take, 0] = np.cos(phi) * np.cos(theta)
        nrm[done:done + take, 1] = np.cos(phi) * np.sin(theta)
        nrm[done:done + take, 2] = np.sin(phi)
        done += take
    return pts, nrm


def _sample_slab(rng, n: int, lx: float, ly: float, thickness: float):
    if lx <= 0 or ly <= 0 or thickness <= 0:
        raise ValueError("slab dimensions must be positive")
    # six faces of the box [-lx/2, lx/2] x [-ly/2, ly/2] x [-t/2, t/2]
    areas = np.array([lx * ly, lx * ly, lx * thickness, lx * thickness,
                      ly * thickness, ly * thickness])
    counts = rng.multinomial(n, areas / areas.sum())
    half = np.array([lx, ly, thickness]) / 2.0
    face_axis = [2, 2, 1, 1, 0, 0]
    face_sign = [1, -1, 1, -1, 1, -1]
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    at = 0
    for f in range(6):
        c = counts[f]
        axis, sign = face_axis[f], face_sign[f]
        others = [a for a in range(3) if a != axis]
        block = np.empty((c, 3))
        block[:, axis] = sign * half[axis]
        for a in others:
            block[:, a] = rng.uniform(-half[a], half[a], c)
        pts[at:at + c] = block
        nrm[at:at + c, axis] = sign
        at += c
    return pts, nrm


def synth_shape(kind: str, n_points: int, seed: int = 0, **params) -> PointCloud:
    """Uniform-area surface sampling with analytic outward normals.

    kinds: sphere (radius), nested_spheres (radii), torus (major, minor),
    thin_slab (lx, ly, thickness).
    """
    if n_points < 4:
        raise ValueError("n_points must be at least 4")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts, nrm = _sample_sphere(rng, n_points, params.get("radius", 1.0))
    elif kind == "nested_spheres":
        radii = np.asarray(params.get("radii", (0.5, 0.75, 1.0)), dtype=float)
        if np.any(radii <= 0):
            raise ValueError("radii must be positive")
        areas = radii ** 2
        counts = np.floor(n_points * areas / areas.sum()).astype(int)
        counts[np.argsort(counts)[:n_points - counts.sum()]] += 1
        parts = [_sample_sphere(rng, int(c), float(r)) for c, r in zip(counts, radii) if c > 0]
        pts = np.concatenate([p for p, _ in parts])
        nrm = np.concatenate([m for _, m in parts])
    elif kind == "torus":
        pts, nrm = _sample_torus(rng, n_points, params.get("major", 1.0),
                                 params.get("minor", 0.3))
    elif kind == "thin_slab":
        pts, nrm = _sample_slab(rng, n_points, params.get("lx", 1.0),
                                params.get("ly", 1.0), params.get("thickness", 0.05))
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return PointCloud(pts, _unit_rows(nrm))


def add_noise(cloud: PointCloud, sigma: float, ratio: float = 1.0,
              seed: int = 0) -> PointCloud:
    """Perturb round(ratio*N) points with isotropic Gaussian displacement.

    sigma is a fraction of the bounding-box diagonal; ground-truth normals
    are kept as sampled.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n = len(cloud)
    count = int(round(ratio * n))
    pos = cloud.positions.copy()
    if sigma > 0 and count > 0:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(n, size=count, replace=False)
        diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
        pos[chosen] += rng.normal(0.0, sigma * diag, size=(count, 3))
    return PointCloud(pos, cloud.gt_normals, cloud.transform)
