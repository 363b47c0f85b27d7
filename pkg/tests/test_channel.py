import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckmkit.channel import (
    EDGE_SNAP_M,
    GeometryViolation,
    GridSpec,
    Link,
    Pdp,
    ScalarMap,
    ToaBinSpec,
    bin_of,
    bins_of_array,
    mean_abs_err_db,
    pdp_to_rss,
    read_esri_ascii,
    read_pdp_csv,
    rmse_db,
    write_esri_ascii,
    write_pdp_csv,
)

BINS32 = ToaBinSpec(num_bins=32, bin_width_ns=0.6)


class TestBinOf:
    def test_los_boundary_maps_to_first_bin(self):
        assert bin_of(10.0, 10.0, BINS32) == 0

    def test_fractional_excess(self):
        # (10.36 - 10) / 0.1798754748 = 2.0014 -> floor 2
        assert bin_of(10.36, 10.0, BINS32) == 2

    def test_first_out_of_range_index(self):
        assert bin_of(10.0 + 32 * BINS32.delta_m, 10.0, BINS32) is None

    def test_edge_is_left_closed(self):
        edge = 10.0 + 5 * BINS32.delta_m
        assert bin_of(edge, 10.0, BINS32) == 5
        assert bin_of(np.nextafter(edge, np.inf), 10.0, BINS32) == 5

    def test_edge_snap_from_below(self):
        edge = 10.0 + 5 * BINS32.delta_m
        # within the snap tolerance below the edge -> the edge's bin
        assert bin_of(edge - 0.5 * EDGE_SNAP_M, 10.0, BINS32) == 5
        # clearly below the snap band -> previous bin
        assert bin_of(edge - 10 * EDGE_SNAP_M, 10.0, BINS32) == 4

    def test_degenerate_on_segment_tolerance(self):
        assert bin_of(10.0 - 0.5 * EDGE_SNAP_M, 10.0, BINS32) == 0

    def test_triangle_violation(self):
        with pytest.raises(GeometryViolation):
            bin_of(9.9, 10.0, BINS32)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            bin_of(math.nan, 10.0, BINS32)
        with pytest.raises(ValueError):
            bin_of(math.inf, 10.0, BINS32)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(min_value=0.0, max_value=20.0),
        st.floats(min_value=0.0, max_value=20.0),
    )
    def test_monotone_nondecreasing(self, e1, e2):
        lo, hi = sorted([e1, e2])
        b_lo = bin_of(100.0 + lo, 100.0, ToaBinSpec(num_bins=2000))
        b_hi = bin_of(100.0 + hi, 100.0, ToaBinSpec(num_bins=2000))
        assert b_lo is not None and b_hi is not None
        assert b_lo <= b_hi

    def test_array_agrees_with_scalar(self):
        rng = np.random.default_rng(7)
        los = 50.0
        sums = los + rng.random(500) * 40.0
        arr = bins_of_array(sums, los, BINS32)
        for s, k in zip(sums, arr):
            expect = bin_of(float(s), los, BINS32)
            assert (expect if expect is not None else -1) == k


class TestToaBinSpec:
    def test_default_width_matches_sounder_resolution(self):
        assert ToaBinSpec(num_bins=4).bin_width_ns == 0.6

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            ToaBinSpec(num_bins=0)
        with pytest.raises(ValueError):
            ToaBinSpec(num_bins=4, bin_width_ns=0.0)

    def test_edges(self):
        bins = ToaBinSpec(num_bins=3, bin_width_ns=1.0)
        edges = bins.edges_m(10.0)
        assert edges[0] == 10.0
        assert np.allclose(np.diff(edges), bins.delta_m)


def make_pdp(gains, mask, num_bins=None):
    n = num_bins or len(gains)
    bins = ToaBinSpec(num_bins=n)
    g = np.full(n, -200.0)
    m = np.zeros(n, dtype=bool)
    g[: len(gains)] = gains
    m[: len(mask)] = mask
    return Pdp(bins, g, m)


class TestPdpToRss:
    def test_single_tap_identity(self):
        pdp = make_pdp([-60.0], [True], num_bins=4)
        assert pdp_to_rss(pdp, 20.0) == pytest.approx(-40.0, abs=1e-12)

    def test_two_equal_taps(self):
        pdp = make_pdp([-60.0, -60.0], [True, True], num_bins=4)
        assert pdp_to_rss(pdp, 0.0) == pytest.approx(-56.9897, abs=1e-4)

    def test_all_masked_out_is_nodata(self):
        pdp = make_pdp([], [], num_bins=4)
        assert pdp_to_rss(pdp, 0.0) is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-120, max_value=0), min_size=1, max_size=16))
    def test_permutation_invariant(self, gains):
        rng = np.random.default_rng(0)
        pdp_a = make_pdp(gains, [True] * len(gains), num_bins=16)
        shuffled = list(rng.permutation(gains))
        pdp_b = make_pdp(shuffled, [True] * len(gains), num_bins=16)
        assert pdp_to_rss(pdp_a, 5.0) == pytest.approx(pdp_to_rss(pdp_b, 5.0), abs=1e-9)

    def test_monotone_in_masked_gain(self):
        base = make_pdp([-60.0, -70.0], [True, True], num_bins=4)
        higher = make_pdp([-59.0, -70.0], [True, True], num_bins=4)
        assert pdp_to_rss(higher, 0.0) > pdp_to_rss(base, 0.0)


class TestMetrics:
    def test_identity_is_zero(self):
        pdp = make_pdp([-60, -70], [True, True], num_bins=4)
        assert mean_abs_err_db(pdp, pdp) == 0.0

    def test_constant_offset(self):
        a = make_pdp([-60, -70, -80], [True] * 3, num_bins=4)
        b = make_pdp([-57, -67, -77], [True] * 3, num_bins=4)
        assert mean_abs_err_db(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_hand_arithmetic(self):
        pred = make_pdp([-60, -70], [True, True], num_bins=4)
        truth = make_pdp([-62, -64], [True, True], num_bins=4)
        assert mean_abs_err_db(pred, truth) == pytest.approx(4.0, abs=1e-12)
        assert rmse_db(pred, truth) == pytest.approx(math.sqrt(20.0), abs=1e-6)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(3)
        a = make_pdp(rng.uniform(-90, -40, 8), [True] * 8, num_bins=8)
        b = make_pdp(rng.uniform(-90, -40, 8), [True] * 8, num_bins=8)
        assert mean_abs_err_db(a, b) == mean_abs_err_db(b, a) >= 0.0

    def test_masked_only_restricts_to_intersection(self):
        a = make_pdp([-60, -70], [True, False], num_bins=4)
        b = make_pdp([-61, -99], [True, True], num_bins=4)
        assert mean_abs_err_db(a, b) == pytest.approx(1.0, abs=1e-12)
        # with masking disabled every bin is compared
        assert mean_abs_err_db(a, b, masked_only=False) > 1.0

    def test_empty_intersection_raises(self):
        a = make_pdp([-60], [True], num_bins=4)
        b = make_pdp([], [], num_bins=4)
        with pytest.raises(ValueError, match="no comparable data"):
            mean_abs_err_db(a, b)

    def test_bin_spec_mismatch(self):
        a = make_pdp([-60], [True], num_bins=4)
        b = make_pdp([-60], [True], num_bins=8)
        with pytest.raises(ValueError):
            mean_abs_err_db(a, b)

    def test_scalar_map_metric(self):
        g1 = ScalarMap((0, 0), 1.0, [[-60.0, -70.0], [-80.0, -9999.0]])
        g2 = ScalarMap((0, 0), 1.0, [[-62.0, -70.0], [-9999.0, -50.0]])
        assert mean_abs_err_db(g1, g2) == pytest.approx(1.0, abs=1e-12)


class TestLink:
    def test_los(self):
        link = Link([0, 0, 0], [3, 4, 0], 1e9)
        assert link.los_m == pytest.approx(5.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            Link([0, 0, np.inf], [1, 1, 1], 1e9)
        with pytest.raises(ValueError):
            Link([0, 0, 0], [1, 1, 1], 0.0)


class TestFileFormats:
    def test_pdp_csv_round_trip(self, tmp_path):
        pdp = make_pdp([-60.25, -72.5], [True, True], num_bins=6)
        path = tmp_path / "p.csv"
        write_pdp_csv(pdp, path)
        back = read_pdp_csv(path)
        assert back.bins == pdp.bins
        assert np.array_equal(back.gains_db, pdp.gains_db)
        assert np.array_equal(back.mask, pdp.mask)

    def test_esri_round_trip(self, tmp_path):
        m = ScalarMap((10.0, 20.0), 2.5, [[-60.0, -61.5], [-70.25, -9999.0]])
        path = tmp_path / "m.asc"
        write_esri_ascii(m, path)
        back = read_esri_ascii(path)
        assert back.same_geometry(m)
        assert np.array_equal(back.values_db, m.values_db)

    def test_esri_rows_written_north_to_south(self, tmp_path):
        m = ScalarMap((0.0, 0.0), 1.0, [[-1.0, -2.0], [-3.0, -4.0]])
        path = tmp_path / "m.asc"
        write_esri_ascii(m, path)
        lines = path.read_text().splitlines()
        assert lines[6].split() == ["-3.0", "-4.0"]  # northern row first
        assert lines[7].split() == ["-1.0", "-2.0"]


class TestGridSpec:
    def test_cell_centers(self):
        grid = GridSpec((0.0, 0.0), 2.0, nx=2, ny=2)
        centers = grid.cell_centers()
        assert centers.shape == (4, 2)
        assert centers[0] == pytest.approx([1.0, 1.0])
        assert centers[3] == pytest.approx([3.0, 3.0])

    def test_to_map_replaces_non_finite(self):
        grid = GridSpec((0.0, 0.0), 1.0, nx=2, ny=1)
        m = grid.to_map([np.nan, -50.0])
        assert m.values_db[0, 0] == m.nodata
