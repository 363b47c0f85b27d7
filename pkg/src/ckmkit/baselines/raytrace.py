"""Point-cloud ray tracing: LOS plus single-bounce specular reflections.

Candidate scatterers come from the per-bin ellipsoid shells; a point
accepts a specular path when the incident direction reflected about its
estimated surface normal points at the receiver within an angular
tolerance. Dense surface sampling produces many accepted points per
physical path, so accepted points are consolidated into paths by spatial
clustering; each path contributes once, taps in one bin combine by
incoherent power sum. Material behavior (reflection loss, foliage
penetration, blocking) is driven by per-class entries in a MaterialTable
whose defaults are engineering placeholders, not measured values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..channel import C_M_PER_S, FLOOR_GAIN_DB, Link, Pdp, ToaBinSpec
from ..cloud import DEFAULT_CLASS_TABLE, SpatialIndex, compute_normals
from ..selector import select_all


def fspl_db(d_m: float, f_hz: float) -> float:
    """Free-space path gain in dB (negative): Friis law."""
    if not (d_m > 0 and f_hz > 0):
        raise ValueError("distance and frequency must be positive")
    return -20.0 * math.log10(4.0 * math.pi * d_m * f_hz / C_M_PER_S)


@dataclass(frozen=True)
class MaterialProps:
    """Per-class interaction parameters, losses in dB (<= 0)."""

    reflect_db: float
    penetrate_db_per_point: float = 0.0
    penetrate_cap_db: float = 0.0
    block: bool = True

    def __post_init__(self) -> None:
        if self.reflect_db > 0 or self.penetrate_db_per_point > 0 or self.penetrate_cap_db > 0:
            raise ValueError("material losses must be <= 0 dB")


_DEFAULT_PROPS = {
    "building": MaterialProps(reflect_db=-6.0, block=True),
    "road": MaterialProps(reflect_db=-9.0, block=True),
    "tree": MaterialProps(
        reflect_db=-12.0, penetrate_db_per_point=-1.5, penetrate_cap_db=-20.0, block=False
    ),
    "vegetation": MaterialProps(
        reflect_db=-12.0, penetrate_db_per_point=-1.5, penetrate_cap_db=-20.0, block=False
    ),
    "vehicle": MaterialProps(reflect_db=-8.0, block=True),
    "ground": MaterialProps(reflect_db=-9.0, block=True),
    "other": MaterialProps(reflect_db=-10.0, block=True),
}


class MaterialTable:
    """Per-semantic-class material properties covering every class id."""

    def __init__(self, props: dict, class_table=DEFAULT_CLASS_TABLE):
        self.class_table = tuple(class_table)
        self.props = dict(props)
        for label in range(len(self.class_table)):
            if label not in self.props:
                raise ValueError(
                    f"material table misses class id {label} ({self.class_table[label]})"
                )

    def for_label(self, label: int) -> MaterialProps:
        return self.props[int(label)]

    @classmethod
    def default(cls, class_table=DEFAULT_CLASS_TABLE) -> "MaterialTable":
        props = {}
        for label, name in enumerate(class_table):
            props[label] = _DEFAULT_PROPS.get(name, _DEFAULT_PROPS["other"])
        return cls(props, class_table)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "reflect_db", "penetrate_db_per_point", "penetrate_cap_db", "block"])
            for label, name in enumerate(self.class_table):
                p = self.props[label]
                w.writerow(
                    [name, repr(p.reflect_db), repr(p.penetrate_db_per_point), repr(p.penetrate_cap_db), int(p.block)]
                )

    @classmethod
    def load_csv(cls, path, class_table=DEFAULT_CLASS_TABLE) -> "MaterialTable":
        by_name = {}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                by_name[row["class"]] = MaterialProps(
                    reflect_db=float(row["reflect_db"]),
                    penetrate_db_per_point=float(row["penetrate_db_per_point"]),
                    penetrate_cap_db=float(row["penetrate_cap_db"]),
                    block=bool(int(row["block"])),
                )
        props = {}
        for label, name in enumerate(class_table):
            if name not in by_name:
                raise ValueError(f"material file {path} misses class {name!r}")
            props[label] = by_name[name]
        return cls(props, class_table)


def _occlusion_extra_db(
    index: SpatialIndex,
    a: np.ndarray,
    b: np.ndarray,
    materials: MaterialTable,
    r_occ: float,
    clear_a: float,
    clear_b: float,
) -> Optional[float]:
    """Penetration loss along segment ab, or None when a blocker sits on it.

    Points within the clearance radius of either endpoint are ignored (the
    endpoints themselves are antennas or the reflecting surface).
    """
    idx = index.segment_neighbors(a, b, r_occ)
    if idx.size == 0:
        return 0.0
    pos = index.cloud.positions[idx]
    da = np.sqrt(((pos - a) ** 2).sum(axis=1))
    db = np.sqrt(((pos - b) ** 2).sum(axis=1))
    keep = (da > clear_a) & (db > clear_b)
    if not keep.any():
        return 0.0
    labels = index.cloud.labels[idx[keep]]
    extra = 0.0
    for label in np.unique(labels):
        props = materials.for_label(label)
        if props.block:
            return None
        count = int((labels == label).sum())
        extra += max(props.penetrate_cap_db, count * props.penetrate_db_per_point)
    return extra


def los_gain(
    index: SpatialIndex,
    link: Link,
    materials: Optional[MaterialTable] = None,
    r_occ: float = 0.15,
    endpoint_clear_m: float = 0.5,
) -> Optional[float]:
    """Direct-path gain in dB, or None when the path is blocked.

    Free-space loss plus capped per-class foliage penetration losses from
    points within r_occ of the segment (excluding both endpoint
    neighborhoods). Any blocking-class point on the path kills it.
    """
    if r_occ <= 0:
        raise ValueError("r_occ must be > 0")
    if link.los_m <= 0:
        raise ValueError("los_gain needs distinct endpoints")
    materials = materials or MaterialTable.default(index.cloud.class_table)
    extra = _occlusion_extra_db(
        index, link.tx, link.rx, materials, r_occ, endpoint_clear_m, endpoint_clear_m
    )
    if extra is None:
        return None
    return fspl_db(link.los_m, link.carrier_hz) + extra


@dataclass
class TraceConfig:
    """Ray-tracing knobs.

    refl_clear_m is the clearance around a reflection point when checking
    its two legs for occlusion; at grazing incidence the reflecting
    surface's own samples sit within r_occ of the leg for several meters,
    so this must exceed the endpoint clearance used for the direct path.
    cluster_radius_m is the linkage scale for consolidating accepted points
    into paths. normals, when given, overrides per-point normal estimation
    (one row per cloud point).
    """

    theta_tol_deg: float = 5.0
    normal_k: int = 16
    stride: int = 1
    r_occ: float = 0.15
    endpoint_clear_m: float = 0.5
    refl_clear_m: float = 3.0
    cluster_radius_m: float = 1.0
    normals: Optional[np.ndarray] = None


def _cluster_labels(positions: np.ndarray, radius: float) -> np.ndarray:
    """Connected components over a voxel hash of side radius.

    Points within radius always share or touch a cell, so they merge;
    merging may extend slightly beyond radius, which only consolidates
    paths harder. Deterministic.
    """
    n = len(positions)
    cells = np.floor(positions / radius).astype(np.int64)
    cell_of = {}
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(n):
        key = tuple(cells[i])
        if key in cell_of:
            union(i, cell_of[key])
        else:
            cell_of[key] = i
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ]
    for key, i in cell_of.items():
        for off in offsets:
            j = cell_of.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if j is not None:
                union(i, j)
    return np.array([find(i) for i in range(n)])


def trace_pdp(
    index: SpatialIndex,
    link: Link,
    bins: ToaBinSpec,
    materials: Optional[MaterialTable] = None,
    cfg: Optional[TraceConfig] = None,
) -> Pdp:
    """Training-free PDP prediction: LOS tap plus single-bounce reflections."""
    materials = materials or MaterialTable.default(index.cloud.class_table)
    cfg = cfg or TraceConfig()
    if cfg.stride < 1:
        raise ValueError("stride must be >= 1")

    power = np.zeros(bins.num_bins)
    has_tap = np.zeros(bins.num_bins, dtype=bool)

    lg = los_gain(index, link, materials, cfg.r_occ, cfg.endpoint_clear_m)
    if lg is not None:
        power[0] += 10.0 ** (lg / 10.0)
        has_tap[0] = True

    selections = select_all(index, link, bins)
    all_candidates = np.concatenate([s.indices[:: cfg.stride] for s in selections])
    if all_candidates.size:
        if cfg.normals is not None:
            normals = np.asarray(cfg.normals, dtype=np.float64)
            if normals.shape != (len(index.cloud), 3):
                raise ValueError("normals override must have one row per cloud point")
        else:
            normals = compute_normals(index, cfg.normal_k, subset=np.unique(all_candidates))

    theta_tol = math.radians(cfg.theta_tol_deg)
    for sel in selections:
        idx = sel.indices[:: cfg.stride]
        if idx.size == 0:
            continue
        d1 = sel.d1[:: cfg.stride]
        d2 = sel.d2[:: cfg.stride]
        ok = (d1 > 1e-9) & (d2 > 1e-9)
        pos = index.cloud.positions[idx]
        n = normals[idx]
        ok &= np.all(np.isfinite(n), axis=1)
        if not ok.any():
            continue
        u = (pos - link.tx) / np.where(d1 > 0, d1, 1.0)[:, None]
        refl = u - 2.0 * (u * n).sum(axis=1)[:, None] * n
        v = (link.rx - pos) / np.where(d2 > 0, d2, 1.0)[:, None]
        cosang = np.clip((refl * v).sum(axis=1), -1.0, 1.0)
        ang = np.arccos(cosang)
        accepted = ok & (ang < theta_tol)
        if not accepted.any():
            continue
        a_idx = idx[accepted]
        a_pos = pos[accepted]
        a_ang = ang[accepted]
        a_d1 = d1[accepted]
        a_d2 = d2[accepted]
        labels_cluster = _cluster_labels(a_pos, cfg.cluster_radius_m)
        for root in np.unique(labels_cluster):
            members = np.nonzero(labels_cluster == root)[0]
            best_local = members[np.lexsort((a_idx[members], a_ang[members]))[0]]
            p = a_pos[best_local]
            extra1 = _occlusion_extra_db(
                index, link.tx, p, materials, cfg.r_occ, cfg.endpoint_clear_m, cfg.refl_clear_m
            )
            if extra1 is None:
                continue
            extra2 = _occlusion_extra_db(
                index, p, link.rx, materials, cfg.r_occ, cfg.refl_clear_m, cfg.endpoint_clear_m
            )
            if extra2 is None:
                continue
            props = materials.for_label(index.cloud.labels[a_idx[best_local]])
            gain = (
                fspl_db(float(a_d1[best_local] + a_d2[best_local]), link.carrier_hz)
                + props.reflect_db
                + extra1
                + extra2
            )
            power[sel.k] += 10.0 ** (gain / 10.0)
            has_tap[sel.k] = True

    gains = np.where(has_tap, 10.0 * np.log10(np.where(power > 0, power, 1.0)), FLOOR_GAIN_DB)
    return Pdp(bins, gains, has_tap)
