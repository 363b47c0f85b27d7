"""Point-cloud environment representation, file I/O, and spatial queries.

Clouds carry per-point position, RGB color, and a semantic class label
(building, road, tree, ...). A uniform voxel grid accelerates neighborhood
queries; every query is exact (grid pruning followed by an exact filter)
and equals a brute-force scan. Clouds and indexes are immutable after
construction, so queries may run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DEFAULT_CLASS_TABLE = (
    "building",
    "road",
    "tree",
    "vegetation",
    "vehicle",
    "ground",
    "other",
)

DEFAULT_CELL_SIZE_M = 2.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Point:
    """A single environment point (view into a cloud)."""

    pos: np.ndarray
    color: np.ndarray
    label: int


class PointCloud:
    """Ordered, index-addressable collection of labeled 3D points."""

    def __init__(
        self,
        positions: np.ndarray,
        colors: Optional[np.ndarray] = None,
        labels: Optional[np.ndarray] = None,
        class_table: Sequence[str] = DEFAULT_CLASS_TABLE,
        normals: Optional[np.ndarray] = None,
    ):
        pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        n = len(pos)
        if colors is None:
            colors = np.full((n, 3), 0.5)
        col = np.array(colors, dtype=np.float64).reshape(-1, 3)
        if len(col) != n:
            raise ValueError("colors length mismatch")
        if n and (col.min() < 0.0 or col.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        if labels is None:
            labels = np.full(n, len(class_table) - 1, dtype=np.int64)
        lab = np.array(labels, dtype=np.int64).reshape(-1)
        if len(lab) != n:
            raise ValueError("labels length mismatch")
        if n and (lab.min() < 0 or lab.max() >= len(class_table)):
            raise ValueError("labels must index the class table")
        self.positions = _readonly(pos)
        self.colors = _readonly(col)
        self.labels = _readonly(lab)
        self.class_table = tuple(class_table)
        self.normals = None
        if normals is not None:
            nm = np.array(normals, dtype=np.float64).reshape(-1, 3)
            if len(nm) != n:
                raise ValueError("normals length mismatch")
            self.normals = _readonly(nm)
        self.n_unknown_labels = 0

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Point:
        return Point(self.positions[i], self.colors[i], int(self.labels[i]))

    def take(self, indices) -> "PointCloud":
        """Subset cloud in the given index order."""
        idx = np.asarray(indices, dtype=np.int64)
        sub = PointCloud(
            self.positions[idx],
            self.colors[idx],
            self.labels[idx],
            self.class_table,
            normals=None if self.normals is None else self.normals[idx],
        )
        return sub

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        """Copy of this cloud with per-point unit normals attached."""
        return PointCloud(self.positions, self.colors, self.labels, self.class_table, normals)

    def bounds(self):
        """(min_corner, max_corner) of all positions; zeros for an empty cloud."""
        if len(self) == 0:
            z = np.zeros(3)
            return z, z
        return self.positions.min(axis=0), self.positions.max(axis=0)


# ---------------------------------------------------------------------------
# File formats


def load_cloud(path, fmt: str = "auto") -> PointCloud:
    """Load a cloud from an XYZRGBL v1 or ascii PLY file.

    Unknown labels map to the "other" class; the count of such rows is kept
    on the returned cloud as n_unknown_labels.
    """
    path = str(path)
    if fmt == "auto":
        fmt = "ply" if path.endswith(".ply") else "xyzrgbl"
    if fmt == "xyzrgbl":
        return _load_xyzrgbl(path)
    if fmt == "ply":
        return _load_ply(path)
    raise ValueError(f"unknown cloud format {fmt!r}")


def _map_label(raw: int, class_table) -> tuple:
    if 0 <= raw < len(class_table):
        return raw, False
    if "other" not in class_table:
        raise ValueError("class table has no 'other' entry for unknown labels")
    return class_table.index("other"), True


def _load_xyzrgbl(path) -> PointCloud:
    class_table = list(DEFAULT_CLASS_TABLE)
    rows = []
    unknown = 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#classes:"):
                    names = line[len("#classes:"):].strip()
                    class_table = [s.strip() for s in names.split(",") if s.strip()]
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                x, y, z, r, g, b = (float(v) for v in parts[:6])
                raw = int(parts[6])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            label, was_unknown = _map_label(raw, class_table)
            unknown += was_unknown
            rows.append((x, y, z, r, g, b, label))
    if not rows:
        cloud = PointCloud(np.zeros((0, 3)), class_table=tuple(class_table))
        return cloud
    arr = np.array(rows)
    cloud = PointCloud(arr[:, :3], arr[:, 3:6], arr[:, 6].astype(np.int64), tuple(class_table))
    cloud.n_unknown_labels = unknown
    return cloud


def save_xyzrgbl(cloud: PointCloud, path) -> None:
    """Write a cloud in XYZRGBL v1; inverse of _load_xyzrgbl."""
    with open(path, "w") as f:
        f.write("#classes: " + ",".join(cloud.class_table) + "\n")
        for p, c, l in zip(cloud.positions.tolist(), cloud.colors.tolist(), cloud.labels.tolist()):
            f.write(
                f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]!r} {c[1]!r} {c[2]!r} {int(l)}\n"
            )


_PLY_PROPS = ("x", "y", "z", "red", "green", "blue", "label")


def _load_ply(path) -> PointCloud:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = None
        props = []  # (name, type) in declaration order for the vertex element
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of PLY header")
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format":
                if parts[1] != "ascii":
                    raise ValueError(f"{path}: only ascii PLY is supported")
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n_vertex = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                props.append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: PLY header declares no vertex element")
        names = [p[0] for p in props]
        for need in _PLY_PROPS:
            if need not in names:
                raise ValueError(f"{path}: PLY vertex element lacks property {need!r}")
        cols = {name: names.index(name) for name in _PLY_PROPS}
        uchar = {name: props[names.index(name)][1] in ("uchar", "uint8") for name in _PLY_PROPS}
        data = np.zeros((n_vertex, 7))
        for i in range(n_vertex):
            parts = f.readline().split()
            if len(parts) < len(names):
                raise ValueError(f"{path}: vertex row {i} is truncated")
            for j, name in enumerate(_PLY_PROPS):
                v = float(parts[cols[name]])
                if name in ("red", "green", "blue") and uchar[name]:
                    v /= 255.0
                data[i, j] = v
    unknown = 0
    labels = np.zeros(n_vertex, dtype=np.int64)
    for i, raw in enumerate(data[:, 6].astype(np.int64)):
        labels[i], was_unknown = _map_label(int(raw), DEFAULT_CLASS_TABLE)
        unknown += was_unknown
    cloud = PointCloud(data[:, :3], data[:, 3:6], labels, DEFAULT_CLASS_TABLE)
    cloud.n_unknown_labels = unknown
    return cloud


# ---------------------------------------------------------------------------
# Spatial index


class SpatialIndex:
    """Uniform voxel grid over a cloud.

    Cells are keyed by integer coordinates floor((p - origin)/cell_size).
    Grid pruning returns supersets; every public query applies the exact
    geometric test afterwards.
    """

    def __init__(self, cloud: PointCloud, cell_size_m: float = DEFAULT_CELL_SIZE_M):
        if not (math.isfinite(cell_size_m) and cell_size_m > 0):
            raise ValueError(f"cell_size_m must be > 0, got {cell_size_m}")
        self.cloud = cloud
        self.cell_size = float(cell_size_m)
        self.origin, _ = cloud.bounds()
        self.cells: dict = {}
        if len(cloud):
            ijk = np.floor((cloud.positions - self.origin) / self.cell_size).astype(np.int64)
            order = np.lexsort((np.arange(len(cloud)), ijk[:, 2], ijk[:, 1], ijk[:, 0]))
            sorted_ijk = ijk[order]
            change = np.any(np.diff(sorted_ijk, axis=0) != 0, axis=1)
            starts = np.concatenate([[0], np.nonzero(change)[0] + 1, [len(cloud)]])
            for s, e in zip(starts[:-1], starts[1:]):
                key = tuple(sorted_ijk[s])
                self.cells[key] = np.sort(order[s:e])

    @property
    def n_occupied_cells(self) -> int:
        return len(self.cells)

    def cell_of(self, pos) -> tuple:
        p = np.asarray(pos, dtype=np.float64)
        return tuple(np.floor((p - self.origin) / self.cell_size).astype(np.int64))

    def _candidates_in_cell_range(self, lo_cell, hi_cell) -> np.ndarray:
        """Point indices in cells within [lo_cell, hi_cell] inclusive, ascending."""
        n_range = 1
        for a, b in zip(lo_cell, hi_cell):
            n_range *= max(0, b - a + 1)
        chunks = []
        if n_range > len(self.cells):
            for key, idx in self.cells.items():
                if all(a <= k <= b for k, a, b in zip(key, lo_cell, hi_cell)):
                    chunks.append(idx)
        else:
            for i in range(lo_cell[0], hi_cell[0] + 1):
                for j in range(lo_cell[1], hi_cell[1] + 1):
                    for k in range(lo_cell[2], hi_cell[2] + 1):
                        idx = self.cells.get((i, j, k))
                        if idx is not None:
                            chunks.append(idx)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(chunks))

    def candidates_in_aabb(self, lo, hi) -> np.ndarray:
        """Superset of points inside the box: all points of overlapping cells."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        lo_cell = tuple(np.floor((lo - self.origin) / self.cell_size).astype(np.int64))
        hi_cell = tuple(np.floor((hi - self.origin) / self.cell_size).astype(np.int64))
        return self._candidates_in_cell_range(lo_cell, hi_cell)

    def knn(self, query_pos, k: int):
        """Exact k nearest neighbors: (indices, distances), ties by index."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        n = len(self.cloud)
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        q = np.asarray(query_pos, dtype=np.float64).reshape(3)
        c0 = np.array(self.cell_of(q))
        found_idx: list = []
        found_d: list = []
        r = 0
        best_kth = np.inf
        total_seen = 0
        max_r = self._max_shell_radius(c0)
        while r <= max_r:
            shell_idx = self._shell_indices(c0, r)
            if shell_idx.size:
                d = np.sqrt(((self.cloud.positions[shell_idx] - q) ** 2).sum(axis=1))
                found_idx.append(shell_idx)
                found_d.append(d)
                total_seen += shell_idx.size
            if total_seen >= k:
                all_d = np.concatenate(found_d)
                kth = np.partition(all_d, k - 1)[k - 1]
                best_kth = kth
                # Any point in an unscanned cell is at least r*cell away.
                if best_kth <= r * self.cell_size:
                    break
            r += 1
        idx = np.concatenate(found_idx) if found_idx else np.zeros(0, dtype=np.int64)
        d = np.concatenate(found_d) if found_d else np.zeros(0)
        order = np.lexsort((idx, d))
        take = order[: min(k, idx.size)]
        return idx[take], d[take]

    def _max_shell_radius(self, c0) -> int:
        if not self.cells:
            return 0
        keys = np.array(list(self.cells.keys()))
        return int(np.max(np.abs(keys - c0)))

    def _shell_indices(self, c0, r: int) -> np.ndarray:
        """Indices of points in cells at Chebyshev distance exactly r from c0."""
        chunks = []
        if r == 0:
            idx = self.cells.get(tuple(c0))
            return idx if idx is not None else np.zeros(0, dtype=np.int64)
        # Prefer iterating occupied cells once the shell is large.
        if (2 * r + 1) ** 3 - (2 * r - 1) ** 3 > len(self.cells):
            for key, idx in self.cells.items():
                if max(abs(key[0] - c0[0]), abs(key[1] - c0[1]), abs(key[2] - c0[2])) == r:
                    chunks.append(idx)
        else:
            for i in range(c0[0] - r, c0[0] + r + 1):
                for j in range(c0[1] - r, c0[1] + r + 1):
                    for k in range(c0[2] - r, c0[2] + r + 1):
                        if max(abs(i - c0[0]), abs(j - c0[1]), abs(k - c0[2])) != r:
                            continue
                        idx = self.cells.get((i, j, k))
                        if idx is not None:
                            chunks.append(idx)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)

    def radius_neighbors(self, query_pos, radius_m: float) -> np.ndarray:
        """Exact indices of points within radius of a position, ascending."""
        if radius_m < 0:
            raise ValueError("radius must be >= 0")
        q = np.asarray(query_pos, dtype=np.float64).reshape(3)
        cand = self.candidates_in_aabb(q - radius_m, q + radius_m)
        if cand.size == 0:
            return cand
        d = np.sqrt(((self.cloud.positions[cand] - q) ** 2).sum(axis=1))
        return cand[d <= radius_m]

    def segment_neighbors(self, a, b, radius_m: float) -> np.ndarray:
        """Exact indices of points within radius of segment ab, ascending."""
        if radius_m < 0:
            raise ValueError("radius must be >= 0")
        a = np.asarray(a, dtype=np.float64).reshape(3)
        b = np.asarray(b, dtype=np.float64).reshape(3)
        lo = np.minimum(a, b) - radius_m
        hi = np.maximum(a, b) + radius_m
        cand = self.candidates_in_aabb(lo, hi)
        if cand.size == 0:
            return cand
        d = point_segment_distance(self.cloud.positions[cand], a, b)
        return cand[d <= radius_m]


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each point to segment ab."""
    p = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.sqrt(((p - a) ** 2).sum(axis=1))
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.sqrt(((p - proj) ** 2).sum(axis=1))


def build_index(cloud: PointCloud, cell_size_m: float = DEFAULT_CELL_SIZE_M) -> SpatialIndex:
    return SpatialIndex(cloud, cell_size_m)


# ---------------------------------------------------------------------------
# Geometry estimates


class DegenerateNeighborhood(ValueError):
    """Neighborhood rank < 2: no surface normal is defined."""


def _fix_normal_sign(v: np.ndarray) -> np.ndarray:
    # Prefer the +z hemisphere; break exact ties toward +x, then +y.
    if v[2] != 0.0:
        return v if v[2] > 0 else -v
    if v[0] != 0.0:
        return v if v[0] > 0 else -v
    return v if v[1] >= 0 else -v


def estimate_normal(index: SpatialIndex, p, k: int = 16) -> np.ndarray:
    """Surface normal at a position from its k-neighborhood.

    Unit eigenvector of the neighborhood covariance with smallest
    eigenvalue, sign-fixed to the +z hemisphere (ties toward +x).
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    idx, _ = index.knn(p, k)
    if idx.size < 3:
        raise DegenerateNeighborhood("underdetermined surface: fewer than 3 neighbors")
    pts = index.cloud.positions[idx]
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    w, v = np.linalg.eigh(cov)
    if w[2] <= 0 or w[1] <= 1e-10 * w[2]:
        raise DegenerateNeighborhood("underdetermined surface: neighborhood rank < 2")
    n = v[:, 0]
    n = n / np.sqrt(n @ n)
    return _fix_normal_sign(n)


def _knn_batch(index: SpatialIndex, queries: np.ndarray, k: int):
    """knn for many queries; returns (nq, k) neighbor indices (or -1 padding).

    Queries sharing a voxel are answered together from the 3x3x3 cell block;
    queries the block cannot resolve fall back to the exact per-query path.
    """
    nq = len(queries)
    out = np.full((nq, k), -1, dtype=np.int64)
    if len(index.cloud) == 0 or nq == 0:
        return out
    cells = np.floor((queries - index.origin) / index.cell_size).astype(np.int64)
    order = np.lexsort((np.arange(nq), cells[:, 2], cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    change = np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1, [nq]])
    P = index.cloud.positions
    for s, e in zip(starts[:-1], starts[1:]):
        qidx = order[s:e]
        c0 = sorted_cells[s]
        cand = index._candidates_in_cell_range(c0 - 1, c0 + 1)
        resolved = np.zeros(len(qidx), dtype=bool)
        if cand.size >= k:
            diff = queries[qidx][:, None, :] - P[cand][None, :, :]
            d = np.sqrt((diff**2).sum(axis=2))
            ord2 = np.argsort(d, axis=1, kind="stable")
            kth = d[np.arange(len(qidx)), ord2[:, k - 1]]
            ok = kth <= index.cell_size
            out[qidx[ok], :] = cand[ord2[ok, :k]]
            resolved = ok
        for local_i in np.nonzero(~resolved)[0]:
            qi = qidx[local_i]
            idx, _ = index.knn(queries[qi], k)
            out[qi, : idx.size] = idx
    return out


def compute_normals(index: SpatialIndex, k: int = 16, subset=None) -> np.ndarray:
    """Batched normal estimation for all (or a subset of) cloud points.

    Degenerate neighborhoods yield NaN rows instead of raising, so large
    clouds with a few bad spots can still be processed; callers decide how
    to treat the gaps.
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    cloud = index.cloud
    if subset is None:
        subset = np.arange(len(cloud))
    else:
        subset = np.asarray(subset, dtype=np.int64)
    out = np.full((len(cloud), 3), np.nan)
    if subset.size == 0:
        return out
    queries = cloud.positions[subset]
    nbr = _knn_batch(index, queries, k)
    valid_counts = (nbr >= 0).sum(axis=1)
    safe = np.where(nbr >= 0, nbr, 0)
    pts = cloud.positions[safe]  # (nq, k, 3)
    w_mask = (nbr >= 0)[..., None]
    counts = np.maximum(valid_counts, 1)[:, None, None]
    mean = (pts * w_mask).sum(axis=1, keepdims=True) / counts
    centered = (pts - mean) * w_mask
    cov = np.einsum("nki,nkj->nij", centered, centered) / counts
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    ok = (valid_counts >= 3) & (w[:, 2] > 0) & (w[:, 1] > 1e-10 * np.maximum(w[:, 2], 1e-300))
    norms = np.sqrt((normals**2).sum(axis=1))
    normals = normals / np.where(norms > 0, norms, 1.0)[:, None]
    sign = np.where(
        normals[:, 2] != 0,
        np.sign(normals[:, 2]),
        np.where(normals[:, 0] != 0, np.sign(normals[:, 0]), np.where(normals[:, 1] >= 0, 1.0, -1.0)),
    )
    normals *= sign[:, None]
    normals[~ok] = np.nan
    out[subset] = normals
    return out


# ---------------------------------------------------------------------------
# Farthest point sampling


def fps_indices(xyz: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point subset of n row indices.

    Start: the lowest-index point among those farthest from the centroid.
    Each subsequent pick maximizes the minimum distance to the chosen set;
    ties break toward the lowest index. Fully deterministic.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    size = len(xyz)
    if not 1 <= n <= size:
        raise ValueError(f"n must be in [1, {size}], got {n}")
    centroid = xyz.mean(axis=0)
    d = np.sqrt(((xyz - centroid) ** 2).sum(axis=1))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = int(np.argmax(d))  # argmax returns the first (lowest) index on ties
    min_d = np.sqrt(((xyz - xyz[chosen[0]]) ** 2).sum(axis=1))
    for i in range(1, n):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, np.sqrt(((xyz - xyz[nxt]) ** 2).sum(axis=1)), out=min_d)
    return chosen


def fps(cloud: PointCloud, n: int, seed: Optional[int] = None) -> np.ndarray:
    """Farthest-point sample of a cloud; returns selected indices.

    The documented start rule pins the whole selection, so the result does
    not depend on seed; the parameter is accepted for interface stability.
    """
    del seed
    return fps_indices(cloud.positions, n)
