"""Core channel-knowledge types shared across the toolkit.

Delay-domain knowledge is a power delay profile (PDP): one channel gain in
dB relative to transmit power per time-of-arrival bin. Bins are half-open
path-length intervals anchored at the line-of-sight distance of the link,
so bin 0 always holds the direct-path tap and profiles from different
links line up. Scalar knowledge (received signal strength in dBm) lives on
regular 2D grids.

All types are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Propagation speed; path-length bins are delay bins scaled by c.
C_M_PER_NS = 0.299792458
C_M_PER_S = 2.99792458e8

# Gains this far below transmit power count as noise (typical sounder
# dynamic range); used as the default mask threshold on predicted PDPs.
NOISE_FLOOR_DB = -130.0

# Placeholder gain stored in bins whose mask is false.
FLOOR_GAIN_DB = -200.0

# Path sums within this distance of a bin edge snap to the edge's bin.
# Keeps the half-open edge semantics robust: a point generated analytically
# on a bounding ellipsoid classifies into the bin that surface opens, even
# though its recomputed path sum carries rounding of order 1e-13 m. The
# same tolerance absorbs the degenerate on-segment case at the LOS edge.
EDGE_SNAP_M = 1e-9


class GeometryViolation(ValueError):
    """Inputs break the triangle inequality or basic link geometry."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ToaBinSpec:
    """Half-open path-length bins anchored at a link's LOS distance.

    Bin k covers ``[los + k*delta_m, los + (k+1)*delta_m)`` where
    ``delta_m = C_M_PER_NS * bin_width_ns``. The LOS distance is supplied
    per query, not stored here, so one spec serves every link.
    """

    num_bins: int
    bin_width_ns: float = 0.6

    def __post_init__(self) -> None:
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {self.num_bins}")
        if not (math.isfinite(self.bin_width_ns) and self.bin_width_ns > 0):
            raise ValueError(f"bin_width_ns must be > 0, got {self.bin_width_ns}")

    @property
    def delta_m(self) -> float:
        """Path-length width of one bin in meters."""
        return C_M_PER_NS * self.bin_width_ns

    def edges_m(self, los_m: float) -> np.ndarray:
        """The num_bins+1 bin edges in meters for a link with LOS distance los_m."""
        return los_m + np.arange(self.num_bins + 1) * self.delta_m


def bin_of(path_sum_m: float, los_m: float, bins: ToaBinSpec) -> Optional[int]:
    """Map a total path length to its ToA bin index, or None if out of range.

    Left-closed, right-open bins: a path sum exactly on an edge belongs to
    the bin the edge opens. Values within EDGE_SNAP_M below an edge snap up
    to it (see module constant). A path sum shorter than the LOS distance
    by more than the snap tolerance is a geometry violation.
    """
    if not (math.isfinite(path_sum_m) and math.isfinite(los_m)):
        raise ValueError("path_sum_m and los_m must be finite")
    if los_m < 0:
        raise ValueError(f"los_m must be >= 0, got {los_m}")
    excess = path_sum_m - los_m
    if excess < -EDGE_SNAP_M:
        raise GeometryViolation(
            f"path sum {path_sum_m} m is below the LOS distance {los_m} m"
        )
    delta = bins.delta_m
    k = math.floor(excess / delta)
    if (k + 1) * delta - excess <= EDGE_SNAP_M:
        k += 1
    if k < 0:
        k = 0
    return k if k < bins.num_bins else None


def bins_of_array(path_sums_m: np.ndarray, los_m: float, bins: ToaBinSpec) -> np.ndarray:
    """Vectorized bin_of. Out-of-range entries map to -1.

    Uses the same arithmetic as bin_of so scalar and bulk classification
    agree exactly.
    """
    ps = np.asarray(path_sums_m, dtype=np.float64)
    if not np.all(np.isfinite(ps)):
        raise ValueError("path sums must be finite")
    if los_m < 0:
        raise ValueError(f"los_m must be >= 0, got {los_m}")
    excess = ps - los_m
    if np.any(excess < -EDGE_SNAP_M):
        raise GeometryViolation("path sum below the LOS distance")
    delta = bins.delta_m
    k = np.floor(excess / delta).astype(np.int64)
    snap = (k + 1) * delta - excess <= EDGE_SNAP_M
    k = np.where(snap, k + 1, k)
    k = np.maximum(k, 0)
    return np.where(k < bins.num_bins, k, -1)


@dataclass(frozen=True, eq=False)
class Link:
    """One transmitter/receiver pair with carrier and transmit power."""

    tx: np.ndarray
    rx: np.ndarray
    carrier_hz: float
    tx_power_dbm: float = 0.0

    def __post_init__(self) -> None:
        for name in ("tx", "rx"):
            v = np.array(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} position must be finite")
            object.__setattr__(self, name, _readonly(v))
        if not (math.isfinite(self.carrier_hz) and self.carrier_hz > 0):
            raise ValueError(f"carrier_hz must be > 0, got {self.carrier_hz}")
        if not math.isfinite(self.tx_power_dbm):
            raise ValueError("tx_power_dbm must be finite")

    @property
    def los_m(self) -> float:
        """Direct-path distance between transmitter and receiver."""
        return float(np.sqrt(((self.tx - self.rx) ** 2).sum()))


@dataclass(eq=False)
class Pdp:
    """Power delay profile: per-bin gain in dB relative to transmit power.

    mask marks bins carrying valid (above-floor) energy; gains in unmasked
    bins are placeholders and excluded from masked comparisons.
    """

    bins: ToaBinSpec
    gains_db: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        g = np.array(self.gains_db, dtype=np.float64).reshape(-1)
        m = np.array(self.mask, dtype=bool).reshape(-1)
        if len(g) != self.bins.num_bins or len(m) != self.bins.num_bins:
            raise ValueError(
                f"gains_db and mask must have length {self.bins.num_bins}"
            )
        if not np.all(np.isfinite(g[m])):
            raise ValueError("gains_db must be finite where mask is true")
        self.gains_db = _readonly(g)
        self.mask = _readonly(m)


def pdp_to_rss(pdp: Pdp, tx_power_dbm: float) -> Optional[float]:
    """Collapse a PDP to a received signal strength in dBm.

    Incoherent power sum over masked bins (a magnitude profile stores no
    phase, so coherent combining is impossible). Returns None when no bin
    is masked valid.
    """
    if not pdp.mask.any():
        return None
    total = np.sum(10.0 ** (pdp.gains_db[pdp.mask] / 10.0))
    return tx_power_dbm + 10.0 * math.log10(total)


@dataclass(eq=False)
class ScalarMap:
    """Regular 2D grid of scalar channel knowledge (dB/dBm values).

    origin is the lower-left corner; values_db is (ny, nx) with row 0 the
    southernmost row. Cells without knowledge hold the nodata sentinel.
    """

    origin: tuple
    cell_size: float
    values_db: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cell_size) and self.cell_size > 0):
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        v = np.array(self.values_db, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("values_db must be a non-empty 2D array")
        bad = ~np.isfinite(v) & ~(v == self.nodata)
        if bad.any():
            raise ValueError("values_db must be finite or equal to nodata")
        self.values_db = _readonly(v)

    @property
    def ny(self) -> int:
        return self.values_db.shape[0]

    @property
    def nx(self) -> int:
        return self.values_db.shape[1]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values_db) & (self.values_db != self.nodata)

    def cell_centers(self) -> np.ndarray:
        """(ny, nx, 2) array of cell-center coordinates."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx, yy], axis=-1)

    def same_geometry(self, other: "ScalarMap") -> bool:
        return (
            self.origin == other.origin
            and self.cell_size == other.cell_size
            and self.values_db.shape == other.values_db.shape
            and self.nodata == other.nodata
        )


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a map to be produced: lower-left origin, cell size, extent."""

    origin: tuple
    cell_size: float
    nx: int
    ny: int
    height_m: float = 1.5

    def __post_init__(self) -> None:
        if self.cell_size <= 0 or self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have positive cell size and dimensions")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def cell_centers(self) -> np.ndarray:
        """(ny*nx, 2) cell centers, row-major from the southern row."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def to_map(self, values: np.ndarray, nodata: float = -9999.0) -> ScalarMap:
        v = np.asarray(values, dtype=np.float64).reshape(self.ny, self.nx)
        v = np.where(np.isfinite(v), v, nodata)
        return ScalarMap(self.origin, self.cell_size, v, nodata)


@dataclass
class MeasurementSet:
    """Sparse ground-truth measurements: PDP records and/or RSS samples."""

    pdp_records: list = field(default_factory=list)
    rss_records: list = field(default_factory=list)

    def __post_init__(self) -> None:
        specs = {rec[1].bins for rec in self.pdp_records}
        if len(specs) > 1:
            raise ValueError("all PDP records must share one ToaBinSpec")

    @property
    def bins(self) -> Optional[ToaBinSpec]:
        return self.pdp_records[0][1].bins if self.pdp_records else None

    def __len__(self) -> int:
        return len(self.pdp_records) + len(self.rss_records)


def _paired_values(pred, truth, masked_only: bool = True):
    if isinstance(pred, Pdp) and isinstance(truth, Pdp):
        if pred.bins != truth.bins:
            raise ValueError("PDPs must share the same bin spec")
        if masked_only:
            valid = pred.mask & truth.mask
        else:
            valid = np.ones(pred.bins.num_bins, dtype=bool)
        return pred.gains_db[valid], truth.gains_db[valid]
    if isinstance(pred, ScalarMap) and isinstance(truth, ScalarMap):
        if not pred.same_geometry(truth):
            raise ValueError("maps must share the same grid geometry")
        valid = pred.valid_mask() & truth.valid_mask()
        return pred.values_db[valid], truth.values_db[valid]
    raise TypeError("pred and truth must both be Pdp or both be ScalarMap")


def mean_abs_err_db(pred, truth, masked_only: bool = True) -> float:
    """Mean absolute error in dB over bins/cells valid on both sides."""
    a, b = _paired_values(pred, truth, masked_only)
    if a.size == 0:
        raise ValueError("no comparable data: empty valid intersection")
    return float(np.mean(np.abs(a - b)))


def rmse_db(pred, truth, masked_only: bool = True) -> float:
    """Root-mean-square error in dB over bins/cells valid on both sides."""
    a, b = _paired_values(pred, truth, masked_only)
    if a.size == 0:
        raise ValueError("no comparable data: empty valid intersection")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------------------------
# File formats


def write_pdp_csv(pdp: Pdp, path) -> None:
    """Write a PDP as CSV with header bin,toa_ns,gain_db,mask."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "toa_ns", "gain_db", "mask"])
        for k in range(pdp.bins.num_bins):
            w.writerow(
                [
                    k,
                    repr(k * pdp.bins.bin_width_ns),
                    repr(float(pdp.gains_db[k])),
                    int(pdp.mask[k]),
                ]
            )


def read_pdp_csv(path, bin_width_ns: Optional[float] = None) -> Pdp:
    """Read a PDP written by write_pdp_csv.

    The bin width is inferred from the toa_ns column when at least two rows
    are present; a single-row file needs an explicit bin_width_ns.
    """
    rows = []
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        required = {"bin", "toa_ns", "gain_db", "mask"}
        if r.fieldnames is None or not required.issubset(r.fieldnames):
            raise ValueError(f"{path}: expected header bin,toa_ns,gain_db,mask")
        for row in r:
            rows.append(
                (int(row["bin"]), float(row["toa_ns"]), float(row["gain_db"]), bool(int(row["mask"])))
            )
    if not rows:
        raise ValueError(f"{path}: empty PDP file")
    rows.sort(key=lambda t: t[0])
    if [t[0] for t in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: bin indices must be 0..n-1")
    if len(rows) >= 2:
        width = rows[1][1] - rows[0][1]
    elif bin_width_ns is not None:
        width = bin_width_ns
    else:
        raise ValueError(f"{path}: cannot infer bin width from a single row")
    bins = ToaBinSpec(num_bins=len(rows), bin_width_ns=width)
    gains = np.array([t[2] for t in rows])
    mask = np.array([t[3] for t in rows])
    return Pdp(bins, gains, mask)


def write_esri_ascii(m: ScalarMap, path) -> None:
    """Write a map as an ESRI ASCII grid (rows north to south)."""
    with open(path, "w") as f:
        f.write(f"ncols {m.nx}\n")
        f.write(f"nrows {m.ny}\n")
        f.write(f"xllcorner {m.origin[0]!r}\n")
        f.write(f"yllcorner {m.origin[1]!r}\n")
        f.write(f"cellsize {m.cell_size!r}\n")
        f.write(f"NODATA_value {m.nodata!r}\n")
        for row in m.values_db[::-1]:
            f.write(" ".join(repr(v) for v in row.tolist()) + "\n")


def read_esri_ascii(path) -> ScalarMap:
    """Read an ESRI ASCII grid written by write_esri_ascii."""
    header = {}
    data_rows = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 2 and parts[0].lower() in {
                "ncols",
                "nrows",
                "xllcorner",
                "yllcorner",
                "cellsize",
                "nodata_value",
            }:
                header[parts[0].lower()] = float(parts[1])
            else:
                data_rows.append([float(v) for v in parts])
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"):
        if key not in header:
            raise ValueError(f"{path}: missing ESRI ASCII header field {key}")
    values = np.array(data_rows)[::-1]
    if values.shape != (int(header["nrows"]), int(header["ncols"])):
        raise ValueError(f"{path}: grid shape does not match header")
    return ScalarMap(
        (header["xllcorner"], header["yllcorner"]),
        header["cellsize"],
        values,
        nodata=header["nodata_value"],
    )
