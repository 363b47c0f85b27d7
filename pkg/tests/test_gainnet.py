import numpy as np
import pytest

from ckmkit import gainnet as gn
from ckmkit.channel import Link, MeasurementSet, ToaBinSpec
from ckmkit.cloud import PointCloud, SpatialIndex
from ckmkit.selector import select_all

from conftest import random_feature_rows, small_model, two_ray_bundle

BINS = ToaBinSpec(num_bins=24, bin_width_ns=0.6)


class TestCanonicalFrame:
    def test_axis_aligned(self):
        frame = gn.canonical_frame([0, 0, 0], [10, 0, 0])
        assert frame.origin == pytest.approx([5, 0, 0])
        assert frame.rot[0] == pytest.approx([1, 0, 0])
        assert frame.scale == pytest.approx(0.1)

    def test_foci_normalization(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            tx, rx = rng.random(3) * 50, rng.random(3) * 50
            frame = gn.canonical_frame(tx, rx)
            assert frame.apply(tx)[0] == pytest.approx([-0.5, 0, 0], abs=1e-12)
            assert frame.apply(rx)[0] == pytest.approx([0.5, 0, 0], abs=1e-12)

    def test_vertical_link_fallback_is_orthonormal(self):
        frame = gn.canonical_frame([0, 0, 0], [0, 0, 10])
        gram = frame.rot @ frame.rot.T
        assert gram == pytest.approx(np.eye(3), abs=1e-12)

    def test_coincident_endpoints(self):
        frame = gn.canonical_frame([1, 2, 3], [1, 2, 3])
        assert np.array_equal(frame.rot, np.eye(3))
        assert frame.scale == 1.0


def selection_for(cloud, index, link, k):
    return select_all(index, link, BINS)[k]


class TestFeaturize:
    def test_point_at_tx_row_layout(self):
        cloud = PointCloud([[0.0, 0, 0]], labels=[1])
        index = SpatialIndex(cloud, 2.0)
        link = Link([0, 0, 0], [10, 0, 0], 2.4e9)
        sel = selection_for(cloud, index, link, 0)
        rows, link_vec = gn.featurize(sel, link, BINS, gn.FeatureSpec(), max_points=8)
        expect = [-0.5, 0, 0, 0.0, 1.0, 0, 1, 0, 0, 0, 0, 0]
        assert rows[0] == pytest.approx(expect, abs=1e-12)
        assert link_vec[0] == pytest.approx(10.0 / 100.0)
        assert link_vec[2] == pytest.approx(np.log10(2.4e9))

    def test_cardinality_contract(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.random((8000, 3)) * 25)
        index = SpatialIndex(cloud, 4.0)
        link = Link([0, 0, 5], [20, 20, 1.5], 2.4e9)
        sel = max(select_all(index, link, BINS), key=len)
        assert len(sel) > 16
        rows, _ = gn.featurize(sel, link, BINS, gn.FeatureSpec(), max_points=16)
        assert rows.shape == (16, gn.FeatureSpec().point_dim)

    def test_small_selection_not_padded(self, shared_two_ray):
        cloud, records, bins, index = shared_two_ray
        link = records[0].link
        sel = select_all(index, link, bins)[1]
        rows, _ = gn.featurize(sel, link, bins, gn.FeatureSpec(), max_points=4096)
        assert rows.shape[0] == len(sel)

    def test_permutation_gives_same_multiset(self):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.random((500, 3)) * 30)
        index = SpatialIndex(cloud, 4.0)
        link = Link([0, 0, 5], [25, 25, 1.5], 2.4e9)
        sel = max(select_all(index, link, BINS), key=len)
        rows, _ = gn.featurize(sel, link, BINS, gn.FeatureSpec(), max_points=1024)
        perm = rng.permutation(len(cloud))
        permuted = PointCloud(cloud.positions[perm])
        index_p = SpatialIndex(permuted, 4.0)
        sel_p = max(select_all(index_p, link, BINS), key=len)
        rows_p, _ = gn.featurize(sel_p, link, BINS, gn.FeatureSpec(), max_points=1024)
        a = rows[np.lexsort(rows.T)]
        b = rows_p[np.lexsort(rows_p.T)]
        assert np.allclose(a, b, atol=1e-12)

    def test_empty_selection_sentinel(self):
        cloud = PointCloud(np.zeros((0, 3)))
        index = SpatialIndex(cloud, 2.0)
        link = Link([0, 0, 0], [10, 0, 0], 2.4e9)
        sel = selection_for(cloud, index, link, 3)
        rows, _ = gn.featurize(sel, link, BINS, gn.FeatureSpec())
        assert rows.shape == (0, gn.FeatureSpec().point_dim)

    def test_normals_requested_but_missing(self, shared_two_ray):
        cloud, records, bins, index = shared_two_ray
        link = records[0].link
        sel = max(select_all(index, link, bins), key=len)
        assert len(sel) > 0
        with pytest.raises(ValueError, match="normals"):
            gn.featurize(sel, link, bins, gn.FeatureSpec(use_normals=True))

    def test_labels_beyond_spec_rejected(self):
        cloud = PointCloud([[1.0, 0, 0]], labels=[6])
        index = SpatialIndex(cloud, 2.0)
        link = Link([0, 0, 0], [10, 0, 0], 2.4e9)
        sel = selection_for(cloud, index, link, 0)
        with pytest.raises(ValueError, match="num_classes"):
            gn.featurize(sel, link, BINS, gn.FeatureSpec(num_classes=3))


class TestForward:
    def test_permutation_bit_identical(self):
        model = small_model(seed=3)
        rows = random_feature_rows(100, seed=4)
        lvec = np.array([0.4, 0.2, 9.4])
        base = gn.forward(model, rows, lvec)
        rng = np.random.default_rng(5)
        for _ in range(3):
            assert gn.forward(model, rows[rng.permutation(100)], lvec) == base

    def test_duplication_bit_identical(self):
        model = small_model(seed=6)
        rows = random_feature_rows(60, seed=7)
        lvec = np.array([0.4, 0.2, 9.4])
        assert gn.forward(model, np.concatenate([rows, rows]), lvec) == gn.forward(
            model, rows, lvec
        )

    def test_reproducible_across_runs(self):
        lvec = np.array([0.1, 0.5, 9.0])
        rows = random_feature_rows(40, seed=8)
        a = gn.forward(small_model(seed=9), rows, lvec)
        b = gn.forward(small_model(seed=9), rows, lvec)
        assert a == b

    def test_empty_set_uses_absence_embedding(self):
        model = small_model(seed=10)
        lvec = np.array([0.1, 0.5, 9.0])
        base = gn.forward(model, np.zeros((0, model.feature_spec.point_dim)), lvec)
        model.params["absence"].data = model.params["absence"].data + 1.0
        bumped = gn.forward(model, np.zeros((0, model.feature_spec.point_dim)), lvec)
        assert bumped != base

    def test_shape_mismatch_raises(self):
        model = small_model(seed=11)
        with pytest.raises(ValueError):
            gn.forward(model, np.zeros((5, 3)), np.array([0.1, 0.5, 9.0]))

    def test_single_point_set(self):
        model = small_model(seed=12)
        out = gn.forward(model, random_feature_rows(1, seed=13), np.array([0.1, 0.5, 9.0]))
        assert np.isfinite(out)


class TestLoss:
    def make_batch(self, preds_equal_targets, model):
        rows = random_feature_rows(20, seed=14)
        lvec = np.array([0.3, 0.1, 9.4])
        out = gn.forward(model, rows, lvec)
        target = out if preds_equal_targets else out - 2.0
        return [(rows, lvec, target, True)]

    def test_zero_when_equal(self):
        model = small_model(seed=15)
        assert gn.loss(model, self.make_batch(True, model)) == pytest.approx(0.0, abs=1e-18)

    def test_two_db_off_gives_four(self):
        model = small_model(seed=16)
        assert gn.loss(model, self.make_batch(False, model)) == pytest.approx(4.0, abs=1e-9)

    def test_two_sample_average(self):
        model = small_model(seed=17)
        rows = random_feature_rows(10, seed=18)
        lvec = np.array([0.3, 0.1, 9.4])
        out = gn.forward(model, rows, lvec)
        batch = [(rows, lvec, out - 1.0, True), (rows, lvec, out + 3.0, True)]
        assert gn.loss(model, batch) == pytest.approx(5.0, abs=1e-9)

    def test_masked_samples_excluded(self):
        model = small_model(seed=19)
        rows = random_feature_rows(10, seed=20)
        lvec = np.array([0.3, 0.1, 9.4])
        out = gn.forward(model, rows, lvec)
        batch = [(rows, lvec, out - 1.0, True), (rows, lvec, out - 100.0, False)]
        assert gn.loss(model, batch) == pytest.approx(1.0, abs=1e-9)

    def test_all_masked_raises(self):
        model = small_model(seed=21)
        rows = random_feature_rows(10, seed=22)
        with pytest.raises(ValueError):
            gn.loss(model, [(rows, np.zeros(3), -60.0, False)])


class TestGradCheck:
    def test_linear_head_near_exact(self):
        # Head-only path: empty point set exercises absence + head layers.
        model = small_model(seed=23)
        sample = (np.zeros((0, model.feature_spec.point_dim)), np.array([0.2, 0.3, 9.4]), -70.0)
        assert gn.grad_check(model, sample, n_params=120, seed=1) < 1e-6

    def test_full_small_model(self):
        model = small_model(seed=24)
        sample = (random_feature_rows(80, seed=25), np.array([0.2, 0.3, 9.4]), -70.0)
        assert gn.grad_check(model, sample, n_params=200, seed=2) < 1e-4

    def test_zero_weight_model_bias_path(self):
        model = small_model(seed=26)
        for name, p in model.params.items():
            if ".w" in name:
                p.data = np.zeros_like(p.data)
        sample = (random_feature_rows(30, seed=27), np.array([0.2, 0.3, 9.4]), -70.0)
        assert gn.grad_check(model, sample, n_params=200, seed=3) < 1e-6


def build_train_data(n_links=6, seed=2, max_points=96):
    cloud, records, bins, index = two_ray_bundle(n_links=n_links, seed=seed)
    train = MeasurementSet(pdp_records=[(r.link, r.pdp) for r in records])
    return gn.TrainData(train=train, index=index, max_points=max_points), bins


class TestTrain:
    def test_overfit_small_dataset(self):
        data, _ = build_train_data(n_links=8, seed=3)
        model = small_model(seed=28)
        cfg = gn.TrainConfig(
            step_size=1e-2, max_epochs=2000, batch_size=8, seed=4, patience=2000
        )
        model, history = gn.train(model, data, cfg)
        assert min(h[1] for h in history) < 1.0

    def test_deterministic_histories(self):
        data, _ = build_train_data(n_links=4, seed=5)
        cfg = gn.TrainConfig(max_epochs=15, batch_size=4, seed=6)
        _, h1 = gn.train(small_model(seed=29), data, cfg)
        _, h2 = gn.train(small_model(seed=29), data, cfg)
        assert h1 == h2

    def test_final_loss_not_above_initial(self):
        data, _ = build_train_data(n_links=4, seed=7)
        cfg = gn.TrainConfig(max_epochs=20, batch_size=4, seed=8)
        model, history = gn.train(small_model(seed=30), data, cfg)
        final = gn._eval_mse(
            model, *gn._prepare_samples(model, data.train, data, True)
        )
        assert final <= history[0][1] + 1e-9

    def test_empty_dataset_errors(self):
        data, _ = build_train_data(n_links=4, seed=9)
        empty = gn.TrainData(train=MeasurementSet(), index=data.index)
        with pytest.raises(ValueError):
            gn.train(small_model(seed=31), empty, gn.TrainConfig(max_epochs=1))

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_aborts_with_checkpoint(self, tmp_path):
        data, _ = build_train_data(n_links=4, seed=10)
        model = small_model(seed=32)
        cfg = gn.TrainConfig(
            step_size=1e12, adaptive=False, max_epochs=50, batch_size=4, seed=11
        )
        with pytest.raises(gn.TrainingDiverged) as exc:
            gn.train(model, data, cfg)
        assert len(exc.value.history) >= 1
        assert all(np.all(np.isfinite(p.data)) for p in exc.value.model.params.values())


class TestPredict:
    def test_shape_and_finiteness(self, shared_two_ray):
        cloud, records, bins, index = shared_two_ray
        model = small_model(seed=33)
        pdp = gn.predict_pdp(model, index, records[0].link, bins, max_points=96)
        assert pdp.bins == bins
        assert np.all(np.isfinite(pdp.gains_db))

    def test_rigid_invariance(self, shared_two_ray):
        cloud, records, bins, index = shared_two_ray
        model = small_model(seed=34)
        link = records[0].link
        base = gn.predict_pdp(model, index, link, bins, max_points=96)

        angle = 1.1
        rot = np.array(
            [
                [np.cos(angle), -np.sin(angle), 0],
                [np.sin(angle), np.cos(angle), 0],
                [0, 0, 1],
            ]
        )
        shift = np.array([-30.0, 55.0, 3.0])
        moved_cloud = PointCloud(
            cloud.positions @ rot.T + shift, cloud.colors, cloud.labels, cloud.class_table
        )
        moved_index = SpatialIndex(moved_cloud, 4.0)
        moved_link = Link(
            rot @ link.tx + shift, rot @ link.rx + shift, link.carrier_hz, link.tx_power_dbm
        )
        moved = gn.predict_pdp(model, moved_index, moved_link, bins, max_points=96)
        assert moved.gains_db == pytest.approx(base.gains_db, abs=1e-6)

    def test_mirror_symmetric_receivers_identical(self):
        # Scene symmetric about y = 20 (lattice ground), tx on the plane.
        rng = np.random.default_rng(0)
        xs, ys = np.meshgrid(np.arange(0.0, 41.0, 1.0), np.arange(0.0, 41.0, 1.0))
        cloud = PointCloud(np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1))
        index = SpatialIndex(cloud, 4.0)
        model = small_model(seed=35)
        tx = np.array([20.0, 20.0, 10.0])
        rx1 = np.array([32.0, 28.0, 1.5])
        rx2 = np.array([32.0, 12.0, 1.5])  # mirror of rx1 about y = 20
        p1 = gn.predict_pdp(model, index, Link(tx, rx1, 2.4e9), BINS, max_points=96)
        p2 = gn.predict_pdp(model, index, Link(tx, rx2, 2.4e9), BINS, max_points=96)
        assert p2.gains_db == pytest.approx(p1.gains_db, abs=1e-6)

    def test_context_bins_change_inputs(self, shared_two_ray):
        cloud, records, bins, index = shared_two_ray
        model = small_model(seed=36)
        link = records[0].link
        without = gn.predict_pdp(model, index, link, bins, max_points=96)
        with_ctx = gn.predict_pdp(model, index, link, bins, max_points=96, context_bins=2)
        assert not np.array_equal(without.gains_db, with_ctx.gains_db)


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path):
        model = small_model(seed=37)
        rows = random_feature_rows(50, seed=38)
        lvec = np.array([0.2, 0.4, 9.4])
        base = gn.forward(model, rows, lvec)
        path = tmp_path / "model.json"
        gn.save_checkpoint(model, path)
        loaded = gn.load_checkpoint(path)
        assert gn.forward(loaded, rows, lvec) == base

    def test_round_trip_bytes_identical(self, tmp_path):
        model = small_model(seed=39)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        gn.save_checkpoint(model, p1)
        gn.save_checkpoint(gn.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": "other"}')
        with pytest.raises(ValueError, match="version"):
            gn.load_checkpoint(path)
