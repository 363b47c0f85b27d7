"""Ordinary kriging with an exponential variogram fitted to the samples.

The semivariogram system with a single unbiasedness multiplier gives an
exact interpolator (nugget 0 reproduces sample values) whose weights sum
to one for every query. All values are in dB/dBm; interpolation happens in
the measurement domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist, pdist

from ..channel import GridSpec, ScalarMap


@dataclass(frozen=True)
class VariogramModel:
    """Exponential semivariogram: gamma(h) = n + s*(1 - exp(-h/r)), gamma(0) = 0."""

    nugget: float
    sill: float
    range_: float

    def __post_init__(self) -> None:
        if self.nugget < 0 or self.sill <= 0 or self.range_ <= 0:
            raise ValueError("variogram needs nugget >= 0, sill > 0, range > 0")

    def gamma(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + self.sill * (1.0 - np.exp(-h / self.range_))
        return np.where(h > 0, g, 0.0)


def _as_samples(samples):
    """Accept (positions, values) arrays or a list of (position, value) pairs."""
    if isinstance(samples, tuple) and len(samples) == 2 and not np.isscalar(samples[0][0]):
        pos = np.asarray(samples[0], dtype=np.float64)
        val = np.asarray(samples[1], dtype=np.float64)
    else:
        pos = np.array([np.asarray(p, dtype=np.float64) for p, _ in samples])
        val = np.array([float(v) for _, v in samples])
    pos = np.atleast_2d(pos)
    if len(pos) != len(val):
        raise ValueError("positions and values must have equal length")
    return pos, val


def empirical_semivariogram(positions: np.ndarray, values: np.ndarray, n_bins: int = 15):
    """Binned empirical semivariogram up to half the max pairwise distance.

    Returns (lags, semivariances, counts) for the non-empty bins; lags are
    the mean pair distance per bin.
    """
    d = pdist(positions)
    dv = pdist(values[:, None])
    gamma = 0.5 * dv**2
    hmax = d.max()
    if hmax <= 0:
        raise ValueError("all sample positions coincide")
    cutoff = hmax / 2.0
    keep = d <= cutoff
    d, gamma = d[keep], gamma[keep]
    edges = np.linspace(0.0, cutoff, n_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    lags, semis, counts = [], [], []
    for b in range(n_bins):
        m = which == b
        if not m.any():
            continue
        lags.append(d[m].mean())
        semis.append(gamma[m].mean())
        counts.append(int(m.sum()))
    return np.array(lags), np.array(semis), np.array(counts)


def fit_variogram(samples, n_bins: int = 15) -> VariogramModel:
    """Least-squares exponential variogram fit to the empirical semivariogram.

    Deterministic: fixed binning, fixed initial point (range starts at half
    the maximum pair distance), bounded so nugget >= 0.
    """
    pos, val = _as_samples(samples)
    if len(pos) < 8:
        raise ValueError(f"need at least 8 samples, got {len(pos)}")
    d = pdist(pos)
    if np.unique(d).size < 2:
        raise ValueError("insufficient pairs: fewer than 2 distinct distances")
    lags, semis, _ = empirical_semivariogram(pos, val, n_bins)
    if lags.size < 2:
        raise ValueError("insufficient pairs: fewer than 2 usable lag bins")
    s0 = max(float(semis.max()), 1e-9)
    r0 = 0.5 * float(d.max())

    def residuals(p):
        n, s, r = p
        return n + s * (1.0 - np.exp(-lags / r)) - semis

    tiny = 1e-12
    fit = least_squares(
        residuals,
        x0=[0.0, s0, r0],
        bounds=([0.0, tiny, tiny], [np.inf, np.inf, np.inf]),
    )
    n, s, r = fit.x
    return VariogramModel(nugget=max(float(n), 0.0), sill=max(float(s), tiny), range_=max(float(r), tiny))


class _KrigingSystem:
    """Factored ordinary-kriging system for repeated queries."""

    def __init__(self, positions: np.ndarray, values: np.ndarray, model: VariogramModel):
        if len(positions) < 2:
            raise ValueError("ordinary kriging needs at least 2 samples")
        dup = self._duplicate_positions(positions)
        if dup:
            raise ValueError(f"duplicate sample positions at indices {dup}")
        n = len(positions)
        a = np.empty((n + 1, n + 1))
        a[:n, :n] = model.gamma(cdist(positions, positions))
        a[n, :] = 1.0
        a[:, n] = 1.0
        a[n, n] = 0.0
        try:
            self.a_inv = np.linalg.inv(a)
        except np.linalg.LinAlgError as e:
            raise ValueError(f"singular kriging system: {e}") from None
        self.positions = positions
        self.values = values
        self.model = model

    @staticmethod
    def _duplicate_positions(positions: np.ndarray):
        _, inverse, counts = np.unique(positions, axis=0, return_inverse=True, return_counts=True)
        dup_groups = np.nonzero(counts > 1)[0]
        return [list(np.nonzero(inverse == g)[0]) for g in dup_groups]

    def solve(self, query_pos: np.ndarray):
        """Weights, multiplier, and the variogram right-hand side for one query."""
        q = np.asarray(query_pos, dtype=np.float64).reshape(1, -1)
        b = np.empty(len(self.positions) + 1)
        b[:-1] = self.model.gamma(cdist(q, self.positions)[0])
        b[-1] = 1.0
        x = self.a_inv @ b
        return x[:-1], x[-1], b

    def predict(self, query_pos):
        w, mu, b = self.solve(query_pos)
        value = float(w @ self.values)
        variance = float(w @ b[:-1] + mu)
        if variance < 0:
            variance = max(variance, -1e-9)
            variance = max(variance, 0.0)
        return value, variance


def solve_weights(samples, model: VariogramModel, query_pos):
    """Ordinary-kriging weights and Lagrange multiplier for one query."""
    pos, val = _as_samples(samples)
    system = _KrigingSystem(pos, val, model)
    w, mu, _ = system.solve(query_pos)
    return w, mu


def krige(samples, model: VariogramModel, query_pos):
    """Ordinary-kriging estimate and variance at one query position."""
    pos, val = _as_samples(samples)
    system = _KrigingSystem(pos, val, model)
    return system.predict(query_pos)


def krige_map(samples, model: VariogramModel, grid: GridSpec, nodata: float = -9999.0) -> ScalarMap:
    """Krige every cell center; cells beyond 3*range of all samples get nodata."""
    pos, val = _as_samples(samples)
    system = _KrigingSystem(pos, val, model)
    centers = grid.cell_centers()
    if pos.shape[1] == 3:
        centers = np.concatenate(
            [centers, np.full((len(centers), 1), grid.height_m)], axis=1
        )
    reach = 3.0 * model.range_
    dmin = cdist(centers, pos).min(axis=1)
    out = np.full(len(centers), nodata)
    for i in np.nonzero(dmin <= reach)[0]:
        out[i], _ = system.predict(centers[i])
    return grid.to_map(out, nodata)
