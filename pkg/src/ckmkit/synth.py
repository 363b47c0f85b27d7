"""Synthetic scenes and analytic channel oracles for desk-scale experiments.

Scenes are regular ground grids with box buildings and spherical tree
blobs, deterministic under a seed. The oracles are image-method two-ray
channels over the ground plane, optionally with analytic box blockage, and
serve as independent ground truth for the learned estimator and the ray
tracer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .baselines.raytrace import fspl_db
from .channel import FLOOR_GAIN_DB, Link, Pdp, ToaBinSpec, bin_of
from .cloud import DEFAULT_CLASS_TABLE, PointCloud

_COLORS = {
    "ground": (0.5, 0.5, 0.5),
    "road": (0.3, 0.3, 0.3),
    "building": (0.7, 0.6, 0.5),
    "tree": (0.2, 0.6, 0.2),
    "vegetation": (0.3, 0.7, 0.3),
    "vehicle": (0.8, 0.1, 0.1),
    "other": (0.6, 0.6, 0.6),
}


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box building sampled on its faces."""

    corner: tuple
    size: tuple
    spacing: float = 0.5
    label: str = "building"

    def lo(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=np.float64)

    def hi(self) -> np.ndarray:
        return self.lo() + np.asarray(self.size, dtype=np.float64)


@dataclass(frozen=True)
class TreeSpec:
    """Spherical blob of uniformly random points."""

    center: tuple
    radius: float
    count: int
    label: str = "tree"


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic synthetic scene description."""

    ground_size: tuple = (60.0, 60.0)
    ground_spacing: float = 1.0
    boxes: tuple = ()
    trees: tuple = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ground_spacing <= 0:
            raise ValueError("ground_spacing must be > 0")


def _axis_points(extent: float, spacing: float) -> np.ndarray:
    n = int(round(extent / spacing)) + 1
    return np.arange(n) * spacing


def _box_surface(box: BoxSpec) -> np.ndarray:
    """Boundary nodes of the box's axis lattice (shared edges deduplicated).

    The lattice has round(size/spacing)+1 nodes per axis; a node is on the
    surface when any coordinate index is first or last.
    """
    axes = [_axis_points(s, box.spacing) for s in box.size]
    ii, jj, kk = np.meshgrid(
        np.arange(len(axes[0])), np.arange(len(axes[1])), np.arange(len(axes[2])), indexing="ij"
    )
    on_surface = (
        (ii == 0) | (ii == len(axes[0]) - 1)
        | (jj == 0) | (jj == len(axes[1]) - 1)
        | (kk == 0) | (kk == len(axes[2]) - 1)
    )
    pts = np.stack(
        [axes[0][ii[on_surface]], axes[1][jj[on_surface]], axes[2][kk[on_surface]]], axis=1
    )
    return pts + box.lo()


def gen_scene(spec: SceneSpec, class_table=DEFAULT_CLASS_TABLE) -> PointCloud:
    """Generate the scene cloud: ground grid, box faces, tree blobs."""
    label_of = {name: i for i, name in enumerate(class_table)}
    chunks: List[np.ndarray] = []
    labels: List[np.ndarray] = []

    gx = _axis_points(spec.ground_size[0], spec.ground_spacing)
    gy = _axis_points(spec.ground_size[1], spec.ground_spacing)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    ground = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    chunks.append(ground)
    labels.append(np.full(len(ground), label_of["ground"], dtype=np.int64))

    for box in spec.boxes:
        pts = _box_surface(box)
        chunks.append(pts)
        labels.append(np.full(len(pts), label_of[box.label], dtype=np.int64))

    rng = np.random.default_rng(spec.seed)
    for tree in spec.trees:
        dirs = rng.standard_normal((tree.count, 3))
        dirs /= np.sqrt((dirs**2).sum(axis=1))[:, None]
        radii = tree.radius * rng.random(tree.count) ** (1.0 / 3.0)
        pts = np.asarray(tree.center, dtype=np.float64) + dirs * radii[:, None]
        chunks.append(pts)
        labels.append(np.full(len(pts), label_of[tree.label], dtype=np.int64))

    positions = np.concatenate(chunks, axis=0)
    all_labels = np.concatenate(labels)
    colors = np.array([_COLORS[class_table[l]] for l in all_labels])
    return PointCloud(positions, colors, all_labels, class_table)


# ---------------------------------------------------------------------------
# Analytic oracles


def two_ray_pdp(link: Link, bins: ToaBinSpec, gamma_db: float = -9.0) -> Pdp:
    """Image-method two-ray channel over the ground plane z = 0.

    Direct tap at free-space gain in bin 0; ground-reflected tap at the
    mirrored-transmitter path length with a flat reflection loss gamma_db.
    Taps falling in one bin combine by incoherent power sum.
    """
    if gamma_db > 0:
        raise ValueError("gamma_db must be <= 0")
    if link.tx[2] <= 0 or link.rx[2] <= 0:
        raise ValueError("two-ray oracle needs both endpoints above the ground plane")
    d_los = link.los_m
    tx_image = np.array([link.tx[0], link.tx[1], -link.tx[2]])
    d_ref = float(np.sqrt(((tx_image - link.rx) ** 2).sum()))
    taps = [(0, fspl_db(d_los, link.carrier_hz))]
    k_ref = bin_of(d_ref, d_los, bins)
    if k_ref is not None:
        taps.append((k_ref, fspl_db(d_ref, link.carrier_hz) + gamma_db))
    power = np.zeros(bins.num_bins)
    mask = np.zeros(bins.num_bins, dtype=bool)
    for k, gain in taps:
        power[k] += 10.0 ** (gain / 10.0)
        mask[k] = True
    gains = np.where(mask, 10.0 * np.log10(np.where(power > 0, power, 1.0)), FLOOR_GAIN_DB)
    return Pdp(bins, gains, mask)


def segment_box_intersects(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> bool:
    """Slab test: does segment ab cross the axis-aligned box [lo, hi]?"""
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        if d[ax] == 0.0:
            if a[ax] < lo[ax] or a[ax] > hi[ax]:
                return False
            continue
        ta = (lo[ax] - a[ax]) / d[ax]
        tb = (hi[ax] - a[ax]) / d[ax]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return False
    return True


def specular_point(tx: np.ndarray, rx: np.ndarray) -> np.ndarray:
    """Ground reflection point of the two-ray image path."""
    t = tx[2] / (tx[2] + rx[2])
    return np.array([tx[0] + t * (rx[0] - tx[0]), tx[1] + t * (rx[1] - tx[1]), 0.0])


def two_ray_blockage_pdp(
    link: Link,
    bins: ToaBinSpec,
    boxes,
    gamma_db: float = -9.0,
    block_db: float = -25.0,
) -> Pdp:
    """Two-ray oracle with analytic box blockage.

    A tap whose path crosses any box is attenuated by block_db: the direct
    tap when the tx-rx segment intersects, the reflected tap when either
    leg (tx to the specular point, specular point to rx) does. Boxes are
    the analytic BoxSpec geometry, independent of any sampled cloud.
    """
    if block_db > 0:
        raise ValueError("block_db must be <= 0")
    base = two_ray_pdp(link, bins, gamma_db)
    if not boxes:
        return base
    d_los = link.los_m
    tx_image = np.array([link.tx[0], link.tx[1], -link.tx[2]])
    d_ref = float(np.sqrt(((tx_image - link.rx) ** 2).sum()))
    sp = specular_point(link.tx, link.rx)

    los_blocked = False
    ref_blocked = False
    for box in boxes:
        lo, hi = box.lo(), box.hi()
        if not los_blocked and segment_box_intersects(link.tx, link.rx, lo, hi):
            los_blocked = True
        if not ref_blocked and (
            segment_box_intersects(link.tx, sp, lo, hi)
            or segment_box_intersects(sp, link.rx, lo, hi)
        ):
            ref_blocked = True
    taps = [(0, fspl_db(d_los, link.carrier_hz) + (block_db if los_blocked else 0.0))]
    k_ref = bin_of(d_ref, d_los, bins)
    if k_ref is not None:
        taps.append(
            (k_ref, fspl_db(d_ref, link.carrier_hz) + gamma_db + (block_db if ref_blocked else 0.0))
        )
    power = np.zeros(bins.num_bins)
    mask = np.zeros(bins.num_bins, dtype=bool)
    for k, gain in taps:
        power[k] += 10.0 ** (gain / 10.0)
        mask[k] = True
    gains = np.where(mask, 10.0 * np.log10(np.where(power > 0, power, 1.0)), FLOOR_GAIN_DB)
    return Pdp(bins, gains, mask)


def two_ray_oracle(gamma_db: float = -9.0) -> Callable[[Link, ToaBinSpec], Pdp]:
    return lambda link, bins: two_ray_pdp(link, bins, gamma_db)


def blockage_oracle(
    spec: SceneSpec, gamma_db: float = -9.0, block_db: float = -25.0
) -> Callable[[Link, ToaBinSpec], Pdp]:
    return lambda link, bins: two_ray_blockage_pdp(link, bins, spec.boxes, gamma_db, block_db)


# ---------------------------------------------------------------------------
# Dataset synthesis


@dataclass
class SynthLink:
    """One synthesized measurement: link, oracle PDP, train/test split tag."""

    id: int
    link: Link
    pdp: Pdp
    split: str


def synth_dataset(
    spec: SceneSpec,
    n_links: int,
    bins: ToaBinSpec,
    oracle: Callable[[Link, ToaBinSpec], Pdp],
    seed: int,
    tx: tuple,
    carrier_hz: float = 2.4e9,
    tx_power_dbm: float = 30.0,
    rx_height_m: float = 1.5,
    min_range_m: float = 5.0,
    train_fraction: float = 0.8,
):
    """Random receiver placements labeled with oracle PDPs.

    The transmitter stays at the declared mast position; receivers fall
    uniformly over the walkable ground (outside building footprints, at
    rx_height_m). The train split holds floor(train_fraction * n) links,
    assigned by a seeded shuffle. Returns (cloud, list of SynthLink).
    """
    if n_links < 1:
        raise ValueError("n_links must be >= 1")
    cloud = gen_scene(spec)
    rng = np.random.default_rng(seed)
    tx = np.asarray(tx, dtype=np.float64)
    sx, sy = spec.ground_size
    footprints = [(b.lo(), b.hi()) for b in spec.boxes]

    links = []
    while len(links) < n_links:
        x = rng.random() * sx
        y = rng.random() * sy
        rx = np.array([x, y, rx_height_m])
        inside = any(
            lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1] for lo, hi in footprints
        )
        if inside:
            continue
        if float(np.sqrt(((rx - tx) ** 2).sum())) < min_range_m:
            continue
        links.append(Link(tx, rx, carrier_hz, tx_power_dbm))

    n_train = int(math.floor(train_fraction * n_links))
    order = rng.permutation(n_links)
    split = np.array(["test"] * n_links, dtype=object)
    split[order[:n_train]] = "train"

    records = [
        SynthLink(i, link, oracle(link, bins), str(split[i]))
        for i, link in enumerate(links)
    ]
    return cloud, records
