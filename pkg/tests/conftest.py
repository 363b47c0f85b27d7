"""Shared fixtures: compact models and desk-scale synthetic bundles."""

import numpy as np
import pytest

from ckmkit import gainnet as gn
from ckmkit.channel import ToaBinSpec
from ckmkit.cloud import SpatialIndex
from ckmkit.synth import SceneSpec, synth_dataset, two_ray_oracle

SMALL_STAGE1 = gn.StageSpec(num_centroids=16, radius=0.15, max_group=8, widths=(16, 32))
SMALL_STAGE2 = gn.StageSpec(num_centroids=8, radius=0.4, max_group=8, widths=(32, 64))
SMALL_HEAD = (64, 32)


def small_model(seed=0, feature_spec=None):
    return gn.init_gain_model(
        feature_spec=feature_spec or gn.FeatureSpec(),
        stage1=SMALL_STAGE1,
        stage2=SMALL_STAGE2,
        head_widths=SMALL_HEAD,
        seed=seed,
    )


def two_ray_bundle(n_links=8, seed=0, num_bins=24, spacing=1.5, extent=40.0):
    """Flat-ground scene with two-ray oracle PDPs; returns (cloud, records, bins, index)."""
    scene = SceneSpec(ground_size=(extent, extent), ground_spacing=spacing, seed=seed)
    bins = ToaBinSpec(num_bins=num_bins, bin_width_ns=0.6)
    cloud, records = synth_dataset(
        scene,
        n_links,
        bins,
        two_ray_oracle(-9.0),
        seed=seed,
        tx=(extent / 2, extent / 2, 10.0),
        min_range_m=8.0,
    )
    return cloud, records, bins, SpatialIndex(cloud, 4.0)


@pytest.fixture(scope="session")
def shared_two_ray():
    return two_ray_bundle(n_links=8, seed=1)


def random_feature_rows(n, spec=None, seed=0):
    spec = spec or gn.FeatureSpec()
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.num_classes, n)
    cols = [
        rng.random((n, 3)) - 0.5,
        rng.random((n, 1)),
        rng.random((n, 1)),
        np.eye(spec.num_classes)[labels],
    ]
    if spec.use_color:
        cols.append(rng.random((n, 3)))
    if spec.use_normals:
        nm = rng.standard_normal((n, 3))
        cols.append(nm / np.linalg.norm(nm, axis=1, keepdims=True))
    return np.concatenate(cols, axis=1)
