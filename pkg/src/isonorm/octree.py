"""Adaptive octree over a normalized point cloud.

The tree is fully refined to depth 2, then refined along every
point-containing path down to the maximum depth.  At each depth of a
point's path the full 3x3x3 in-domain neighbor stencil is materialized so
that splatting and density estimation never request a missing node.  Node
indexing is deterministic: sorted by depth, then z-order (Morton code).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FULL_DEPTH = 2  # every node down to this depth exists regardless of points

_OFFSETS_27 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


def _pack(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.uint64)
    return (c[..., 0] << np.uint64(24)) | (c[..., 1] << np.uint64(12)) | c[..., 2]


def _unpack(keys: np.ndarray) -> np.ndarray:
    keys = keys.astype(np.uint64)
    mask = np.uint64(0xFFF)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = (keys >> np.uint64(24)) & mask
    out[..., 1] = (keys >> np.uint64(12)) & mask
    out[..., 2] = keys & mask
    return out


def _spread_bits(v: np.ndarray) -> np.ndarray:
    # interleave zeros between the low 16 bits (enough for depth <= 12)
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_code(coords: np.ndarray) -> np.ndarray:
    """Z-order key of integer grid coordinates, x bits highest."""
    c = np.asarray(coords, dtype=np.uint64)
    return (
        (_spread_bits(c[..., 0]) << np.uint64(2))
        | (_spread_bits(c[..., 1]) << np.uint64(1))
        | _spread_bits(c[..., 2])
    )


@dataclass
class Octree:
    max_depth: int
    depths: np.ndarray              # (n_nodes,) node depth
    coords: np.ndarray              # (n_nodes, 3) integer grid coords at that depth
    is_boundary: np.ndarray         # (n_nodes,) bool, basis support reaches the cube faces
    point_nodes: np.ndarray         # (N,) containing max-depth node per sample
    _levels: dict = field(repr=False)  # depth -> (sorted packed keys, node ids)

    @property
    def n_nodes(self) -> int:
        return len(self.depths)

    @property
    def widths(self) -> np.ndarray:
        return 2.0 ** (-self.depths.astype(float))

    @property
    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.widths[:, None]

    @property
    def boundary_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_boundary)

    @property
    def free_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.is_boundary)

    def level_ids(self, depth: int) -> np.ndarray:
        """Ids of all nodes at one depth (unordered)."""
        if depth not in self._levels:
            return np.empty(0, dtype=np.int64)
        return self._levels[depth][1]

    def level_nodes(self, depth: int) -> np.ndarray:
        """Ids of all nodes at one depth, in z-order."""
        ids = self.level_ids(depth)
        return ids[np.argsort(morton_code(self.coords[ids]), kind="stable")]

    def lookup(self, depth: int, coords: np.ndarray) -> np.ndarray:
        """Node ids for integer coords at a depth; -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        single = coords.ndim == 1
        coords = np.atleast_2d(coords)
        out = np.full(len(coords), -1, dtype=np.int64)
        res = 1 << depth
        valid = np.all((coords >= 0) & (coords < res), axis=1)
        if depth in self._levels and valid.any():
            keys, ids = self._levels[depth]
            want = _pack(coords[valid])
            pos = np.searchsorted(keys, want)
            pos = np.minimum(pos, len(keys) - 1)
            hit = keys[pos] == want
            sub = np.full(valid.sum(), -1, dtype=np.int64)
            sub[hit] = ids[pos[hit]]
            out[valid] = sub
        return out[0] if single else out


def build_octree(cloud, max_depth: int) -> Octree:
    """Build the adaptive octree for a normalized cloud.

    Raises ValueError if any point lies outside the open unit cube or the
    depth is out of range.
    """
    if not 1 <= max_depth <= 12:
        raise ValueError(f"max_depth must be in [1, 12], got {max_depth}")
    pts = np.asarray(cloud.positions, dtype=float)
    if pts.size == 0:
        raise ValueError("empty cloud")
    if np.any(pts <= 0.0) or np.any(pts >= 1.0):
        raise ValueError("points must lie strictly inside the unit cube; "
                         "normalize the cloud first")

    level_keys: dict[int, np.ndarray] = {}
    child_keys = None
    for d in range(max_depth, -1, -1):
        res = 1 << d
        cells = np.minimum((pts * res).astype(np.int64), res - 1)
        stencil = cells[:, None, :] + _OFFSETS_27[None, :, :]
        ok = np.all((stencil >= 0) & (stencil < res), axis=2)
        keys = [_pack(stencil[ok])]
        if child_keys is not None:
            parents = _unpack(child_keys) >> 1
            keys.append(_pack(parents))
        if d <= min(FULL_DEPTH, max_depth):
            axis = np.arange(res, dtype=np.int64)
            gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
            keys.append(_pack(np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)))
        level_keys[d] = np.unique(np.concatenate(keys))
        child_keys = level_keys[d]

    # canonical ordering: depth, then morton
    all_depths = []
    all_coords = []
    for d in range(0, max_depth + 1):
        coords = _unpack(level_keys[d])
        order = np.argsort(morton_code(coords), kind="stable")
        coords = coords[order]
        all_depths.append(np.full(len(coords), d, dtype=np.int8))
        all_coords.append(coords)
    depths = np.concatenate(all_depths)
    coords = np.concatenate(all_coords)

    levels = {}
    start = 0
    for d in range(0, max_depth + 1):
        n = len(level_keys[d])
        ids = np.arange(start, start + n, dtype=np.int64)
        keys = _pack(coords[start:start + n])
        order = np.argsort(keys)
        levels[d] = (keys[order], ids[order])
        start += n

    res = 1 << depths.astype(np.int64)
    is_boundary = np.any((coords == 0) | (coords == (res[:, None] - 1)), axis=1)

    top = 1 << max_depth
    cells = np.minimum((pts * top).astype(np.int64), top - 1)
    keys, ids = levels[max_depth]
    pos = np.searchsorted(keys, _pack(cells))
    point_nodes = ids[pos]

    return Octree(
        max_depth=max_depth,
        depths=depths,
        coords=coords,
        is_boundary=is_boundary,
        point_nodes=point_nodes,
        _levels=levels,
    )


def depth_neighbors(tree: Octree, node: int) -> np.ndarray:
    """Existing nodes of the 27-cell cube around a node at its own depth.

    Includes the node itself; deterministic z-order.
    """
    d = int(tree.depths[node])
    targets = tree.coords[node][None, :] + _OFFSETS_27
    ids = tree.lookup(d, targets)
    ids = ids[ids >= 0]
    return ids[np.argsort(morton_code(tree.coords[ids]), kind="stable")]


def dump_nodes(tree: Octree) -> str:
    """Debug dump, one line per node: depth ix iy iz is_boundary."""
    lines = []
    for d, (x, y, z), b in zip(tree.depths, tree.coords, tree.is_boundary):
        lines.append(f"{d} {x} {y} {z} {int(b)}")
    return "\n".join(lines) + "\n"
