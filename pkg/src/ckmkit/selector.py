"""Geometric point selection over confocal-ellipsoid delay shells.

Every total path length tx -> p -> rx defines an ellipsoid with the link
endpoints as foci; a ToA bin therefore corresponds to the shell between
two such confocal ellipsoids. Selecting the cloud points inside each shell
partitions the environment into disjoint per-bin subsets, the candidate
scatterers for that bin's channel tap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .channel import GeometryViolation, Link, ToaBinSpec, bins_of_array
from .cloud import PointCloud, SpatialIndex


def path_sum(tx, rx, p) -> np.ndarray:
    """Total path length d(tx, p) + d(p, rx); >= the foci distance.

    p may be a single position or an (N, 3) array.
    """
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    d1 = np.sqrt(((p - tx) ** 2).sum(axis=-1))
    d2 = np.sqrt(((p - rx) ** 2).sum(axis=-1))
    return d1 + d2


def shell_semi_axes(foci_dist_m: float, path_sum_m: float) -> tuple:
    """Semi-major and semi-minor axes of the constant-path-sum ellipsoid."""
    if not (math.isfinite(foci_dist_m) and math.isfinite(path_sum_m)):
        raise ValueError("inputs must be finite")
    if path_sum_m < foci_dist_m:
        raise GeometryViolation(
            f"path sum {path_sum_m} m below foci distance {foci_dist_m} m"
        )
    a = path_sum_m / 2.0
    c = foci_dist_m / 2.0
    b = math.sqrt(max(a * a - c * c, 0.0))
    return a, b


@dataclass(frozen=True)
class EllipsoidShell:
    """Region between two confocal ellipsoids with foci tx and rx.

    Contains the points whose path sum lies in [sum_lo, sum_hi).
    """

    tx: np.ndarray
    rx: np.ndarray
    sum_lo: float
    sum_hi: float

    def __post_init__(self) -> None:
        tx = np.asarray(self.tx, dtype=np.float64).reshape(3)
        rx = np.asarray(self.rx, dtype=np.float64).reshape(3)
        object.__setattr__(self, "tx", tx)
        object.__setattr__(self, "rx", rx)
        foci = float(np.sqrt(((tx - rx) ** 2).sum()))
        if self.sum_lo < foci - 1e-9:
            raise GeometryViolation("sum_lo below the foci distance")
        if not self.sum_hi > self.sum_lo:
            raise ValueError("sum_hi must exceed sum_lo")

    @property
    def foci_dist(self) -> float:
        return float(np.sqrt(((self.tx - self.rx) ** 2).sum()))


def shell_aabb(shell: EllipsoidShell) -> tuple:
    """Conservative axis-aligned bounding box of the shell.

    A cube of half-extent a_hi (outer semi-major axis) around the foci
    midpoint contains the outer ellipsoid in any orientation, hence the
    whole shell. Sufficient for index pruning, not tight.
    """
    a_hi, _ = shell_semi_axes(shell.foci_dist, shell.sum_hi)
    center = (shell.tx + shell.rx) / 2.0
    half = np.full(3, a_hi)
    return center - half, center + half


def shell_for_bin(link: Link, bins: ToaBinSpec, k: int) -> EllipsoidShell:
    """The confocal shell bounding ToA bin k of a link."""
    if not 0 <= k < bins.num_bins:
        raise ValueError(f"bin index {k} outside [0, {bins.num_bins})")
    los = link.los_m
    return EllipsoidShell(
        link.tx, link.rx, los + k * bins.delta_m, los + (k + 1) * bins.delta_m
    )


@dataclass(eq=False)
class ShellSelection:
    """The cloud subset inside one bin's shell, with cached leg distances."""

    k: int
    cloud: PointCloud
    indices: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return self.cloud.positions[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels[self.indices]

    @property
    def colors(self) -> np.ndarray:
        return self.cloud.colors[self.indices]

    @property
    def points(self) -> PointCloud:
        return self.cloud.take(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def _classify_candidates(index: SpatialIndex, link: Link, bins: ToaBinSpec, cand: np.ndarray):
    """Per-candidate leg distances and bin assignment (-1 = out of range)."""
    P = index.cloud.positions[cand]
    d1 = np.sqrt(((P - link.tx) ** 2).sum(axis=1))
    d2 = np.sqrt(((P - link.rx) ** 2).sum(axis=1))
    assigned = bins_of_array(d1 + d2, link.los_m, bins)
    return d1, d2, assigned


def select_bin(index: SpatialIndex, link: Link, bins: ToaBinSpec, k: int) -> ShellSelection:
    """Exactly the cloud points whose path sum falls in bin k, by ascending index."""
    shell = shell_for_bin(link, bins, k)
    lo, hi = shell_aabb(shell)
    cand = index.candidates_in_aabb(lo, hi)
    if cand.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return ShellSelection(k, index.cloud, empty, np.zeros(0), np.zeros(0))
    d1, d2, assigned = _classify_candidates(index, link, bins, cand)
    keep = assigned == k
    return ShellSelection(k, index.cloud, cand[keep], d1[keep], d2[keep])


def select_all(index: SpatialIndex, link: Link, bins: ToaBinSpec) -> List[ShellSelection]:
    """All per-bin selections in one pass over index-pruned candidates.

    The selections are pairwise disjoint and their union is every point
    with path sum below the outermost bin edge.
    """
    outer = EllipsoidShell(
        link.tx, link.rx, link.los_m, link.los_m + bins.num_bins * bins.delta_m
    )
    lo, hi = shell_aabb(outer)
    cand = index.candidates_in_aabb(lo, hi)
    if cand.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return [
            ShellSelection(k, index.cloud, empty, np.zeros(0), np.zeros(0))
            for k in range(bins.num_bins)
        ]
    d1, d2, assigned = _classify_candidates(index, link, bins, cand)
    out = []
    for k in range(bins.num_bins):
        keep = assigned == k
        out.append(ShellSelection(k, index.cloud, cand[keep], d1[keep], d2[keep]))
    return out


def merge_selections(selections: List[ShellSelection], k: int, context_bins: int = 0) -> ShellSelection:
    """Selection for bin k optionally prepended with the n preceding shells.

    Points of earlier shells can block or scatter energy that would reach
    bin k; whether to expose them to the estimator is configurable.
    """
    if context_bins < 0:
        raise ValueError("context_bins must be >= 0")
    lo = max(0, k - context_bins)
    parts = selections[lo : k + 1]
    idx = np.concatenate([s.indices for s in parts])
    d1 = np.concatenate([s.d1 for s in parts])
    d2 = np.concatenate([s.d2 for s in parts])
    order = np.argsort(idx, kind="stable")
    return ShellSelection(k, selections[k].cloud, idx[order], d1[order], d2[order])
