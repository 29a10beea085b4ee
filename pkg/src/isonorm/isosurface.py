"""Regular-grid sampling of the indicator field and marching cubes.

The extractor exists for sanity checks on the optimized field at the
optimization depth; it is not a high-fidelity reconstruction path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNER_OFFSETS, CORNER_PAIRS, EDGE_TABLE, TRI_TABLE
from .bspline import bspline_value


@dataclass
class ScalarGrid:
    """Axis-aligned scalar samples: values[ix, iy, iz] at origin + index*spacing."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,)).copy()
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 samples per axis")

    @property
    def resolution(self):
        return self.values.shape


def sample_field(tree, coefficients: np.ndarray, resolution: int = 64) -> ScalarGrid:
    """Evaluate the B-spline field sum over a regular grid of the unit cube.

    coefficients are per-node over the full tree (boundary entries zero);
    only nodes with nonzero coefficients are visited.
    """
    if not 2 <= resolution <= 512:
        raise ValueError("resolution must be in [2, 512]")
    if len(coefficients) != tree.n_nodes:
        raise ValueError("coefficient vector must cover every node")
    spacing = 1.0 / (resolution - 1)
    ticks = np.arange(resolution) * spacing
    values = np.zeros((resolution, resolution, resolution))

    active = np.flatnonzero(coefficients)
    depths = tree.depths[active]
    centers = tree.centers[active]
    widths = tree.widths[active]
    for idx in range(len(active)):
        c = centers[idx]
        w = widths[idx]
        coef = coefficients[active[idx]]
        axis_vals = []
        slices = []
        for a in range(3):
            lo = int(np.ceil((c[a] - 1.5 * w) / spacing))
            hi = int(np.floor((c[a] + 1.5 * w) / spacing))
            lo = max(lo, 0)
            hi = min(hi, resolution - 1)
            if hi < lo:
                break
            axis_vals.append(bspline_value((ticks[lo:hi + 1] - c[a]) / w))
            slices.append(slice(lo, hi + 1))
        else:
            patch = coef * np.einsum("i,j,k->ijk", *axis_vals)
            values[slices[0], slices[1], slices[2]] += patch
    return ScalarGrid(origin=np.zeros(3), spacing=spacing, values=values)


def marching_cubes(grid: ScalarGrid, isovalue: float = 0.5):
    """Extract the isosurface triangle mesh from a scalar grid.

    Standard 256-case tables with linear edge interpolation; vertices are
    deduplicated by their lattice edge so shared cell faces stitch
    watertight.  Returns (vertices (V, 3), faces (F, 3)); both empty when
    the surface does not cross the grid.
    """
    vals = grid.values
    if not np.all(np.isfinite(vals)):
        raise ValueError("grid contains non-finite values")
    nx, ny, nz = vals.shape

    inside = vals < isovalue
    # case index per cell, corner c contributes bit c
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        sub = inside[ox:ox + nx - 1, oy:oy + ny - 1, oz:oz + nz - 1]
        case |= sub.astype(np.int32) << c

    verts: list = []
    vert_ids: dict = {}
    faces: list = []

    def edge_vertex(ix, iy, iz, edge):
        c0, c1 = CORNER_PAIRS[edge]
        o0 = CORNER_OFFSETS[c0]
        o1 = CORNER_OFFSETS[c1]
        p0 = (ix + o0[0], iy + o0[1], iz + o0[2])
        p1 = (ix + o1[0], iy + o1[1], iz + o1[2])
        axis = next(a for a in range(3) if o0[a] != o1[a])
        key = (min(p0, p1), axis)
        vid = vert_ids.get(key)
        if vid is None:
            v0 = vals[p0]
            v1 = vals[p1]
            t = 0.5 if v1 == v0 else (isovalue - v0) / (v1 - v0)
            t = min(max(t, 0.0), 1.0)
            base = np.array(p0, dtype=float)
            step = np.array(p1, dtype=float) - base
            vid = len(verts)
            verts.append(grid.origin + (base + t * step) * grid.spacing)
            vert_ids[key] = vid
        return vid

    active = np.argwhere((case != 0) & (case != 255))
    for ix, iy, iz in active:
        tri = TRI_TABLE[case[ix, iy, iz]]
        for t in range(0, len(tri) - 2, 3):
            if tri[t] < 0:
                break
            faces.append((edge_vertex(ix, iy, iz, tri[t]),
                          edge_vertex(ix, iy, iz, tri[t + 1]),
                          edge_vertex(ix, iy, iz, tri[t + 2])))

    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def mesh_stats(verts: np.ndarray, faces: np.ndarray) -> dict:
    """Vertex/edge/face counts, Euler characteristic, component count."""
    n_v = len(verts)
    if len(faces) == 0:
        return {"vertices": n_v, "edges": 0, "faces": 0, "euler": n_v,
                "components": 0}
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)

    parent = np.arange(n_v)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in e:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    used = np.unique(faces)
    comps = len({find(v) for v in used})
    return {"vertices": n_v, "edges": len(e), "faces": len(faces),
            "euler": n_v - len(e) + len(faces), "components": comps}


def write_grid(path: str, grid: ScalarGrid):
    """Header `nx ny nz ox oy oz s` then one value per line, z fastest."""
    nx, ny, nz = grid.resolution
    sp = grid.spacing
    if not np.allclose(sp, sp[0]):
        raise ValueError("grid export requires isotropic spacing")
    with open(path, "w") as f:
        f.write(f"{nx} {ny} {nz} {grid.origin[0]:.10g} {grid.origin[1]:.10g} "
                f"{grid.origin[2]:.10g} {sp[0]:.10g}\n")
        for v in grid.values.ravel():
            f.write(f"{v:.8g}\n")


def write_mesh_ply(path: str, verts: np.ndarray, faces: np.ndarray,
                   comment: str | None = None):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        if comment:
            f.write(f"comment {comment}\n")
        f.write(f"element vertex {len(verts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for p in verts:
            f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")
        for tri in faces:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def write_mesh_obj(path: str, verts: np.ndarray, faces: np.ndarray):
    with open(path, "w") as f:
        for p in verts:
            f.write(f"v {p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
