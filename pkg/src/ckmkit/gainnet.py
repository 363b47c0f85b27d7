"""Learned per-bin channel gain estimation from selected shell points.

A hierarchical set encoder: farthest-point sampling picks centroids, ball
grouping gathers local neighborhoods, a shared per-point MLP transforms
them, and max pooling collapses each group. Two such stages feed a global
max pool whose output, concatenated with link features, drives an MLP head
emitting one gain in dB relative to transmit power.

Max pooling makes the network exactly invariant to point order (input rows
are canonicalized by sorting, so even tie-breaking is order-free), and a
canonical link frame makes predictions invariant to global rigid motions
that preserve the vertical axis. Training runs on the built-in
reverse-mode tape (see autodiff) with a first-order optimizer using
per-parameter second-moment scaling.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import (
    FLOOR_GAIN_DB,
    NOISE_FLOOR_DB,
    Link,
    MeasurementSet,
    Pdp,
    ToaBinSpec,
)
from .cloud import SpatialIndex, fps_indices
from .selector import ShellSelection, merge_selections, select_all

CHECKPOINT_VERSION = "ckm-gain-1"


# ---------------------------------------------------------------------------
# Features


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of per-point and per-link feature vectors.

    Per point: canonical xyz (3), leg distances d1/L0 and d2/L0 (2),
    one-hot class label (num_classes), then rgb (3) and canonical-frame
    normal (3) when enabled. Per link: L0 normalized by a fixed scene
    scale, bin index over num_bins, log10 of the carrier. The scene scale
    is a constant, not derived from the cloud, so features stay invariant
    under rigid motions of the scene.
    """

    num_classes: int = 7
    use_color: bool = False
    use_normals: bool = False
    scene_scale_m: float = 100.0

    @property
    def point_dim(self) -> int:
        return 3 + 2 + self.num_classes + 3 * self.use_color + 3 * self.use_normals

    @property
    def link_dim(self) -> int:
        return 3


@dataclass(frozen=True)
class CanonicalFrame:
    """Rigid transform into link-local coordinates scaled by 1/L0."""

    origin: np.ndarray
    rot: np.ndarray  # rows are the local x, y, z axes
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.origin) @ self.rot.T * self.scale

    def apply_dirs(self, vectors: np.ndarray) -> np.ndarray:
        return np.atleast_2d(vectors) @ self.rot.T


def canonical_frame(tx, rx) -> CanonicalFrame:
    """Link-local frame: origin at the midpoint, local x along tx->rx.

    Local z is chosen so the world vertical lies in the local xz-plane;
    for vertical links the world x-axis takes that role. Coincident
    endpoints fall back to an identity rotation at tx with unit scale.
    """
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    rx = np.asarray(rx, dtype=np.float64).reshape(3)
    d = rx - tx
    length = float(np.sqrt(d @ d))
    if length < 1e-12:
        return CanonicalFrame(tx.copy(), np.eye(3), 1.0)
    x = d / length
    up = np.array([0.0, 0.0, 1.0])
    cr = np.cross(d, up)
    if float(np.sqrt(cr @ cr)) < 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    z = up - (up @ x) * x
    z = z / float(np.sqrt(z @ z))
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return CanonicalFrame((tx + rx) / 2.0, rot, 1.0 / length)


def featurize(
    sel: ShellSelection,
    link: Link,
    bins: ToaBinSpec,
    spec: FeatureSpec,
    max_points: int = 512,
    seed: int = 0,
) -> tuple:
    """Feature matrix for a shell selection plus the link feature vector.

    Selections larger than max_points are thinned by farthest-point
    sampling on the canonical coordinates (deterministic); smaller ones are
    kept as-is, set operations handle variable size. An empty selection
    yields a (0, point_dim) matrix, the empty-set sentinel for forward.
    """
    del seed  # farthest-point sampling is deterministic; kept for interface stability
    if max_points < 1:
        raise ValueError(f"max_points must be >= 1, got {max_points}")
    frame = canonical_frame(link.tx, link.rx)
    link_vec = np.array(
        [
            link.los_m / spec.scene_scale_m,
            sel.k / bins.num_bins,
            math.log10(link.carrier_hz),
        ]
    )
    n = len(sel)
    if n == 0:
        return np.zeros((0, spec.point_dim)), link_vec
    labels = sel.labels
    if labels.max() >= spec.num_classes:
        raise ValueError(
            f"cloud labels exceed feature spec num_classes={spec.num_classes}"
        )
    xyz = frame.apply(sel.positions)
    # Canonicalize the transverse orientation: mirroring scene and link
    # flips every canonical y, so gauging the flip from the point set makes
    # features identical for mirror-symmetric links (gain is mirror
    # invariant). An exactly symmetric set is its own mirror image.
    flip_y = xyz[:, 1].sum() < 0
    if flip_y:
        xyz = xyz * np.array([1.0, -1.0, 1.0])
    denom = link.los_m if link.los_m > 0 else 1.0
    cols = [
        xyz,
        (sel.d1 / denom)[:, None],
        (sel.d2 / denom)[:, None],
        np.eye(spec.num_classes)[labels],
    ]
    if spec.use_color:
        cols.append(sel.colors)
    if spec.use_normals:
        if sel.cloud.normals is None:
            raise ValueError("normals requested but the cloud carries none")
        nm = sel.cloud.normals[sel.indices]
        if not np.all(np.isfinite(nm)):
            raise ValueError("normals requested but some are undefined")
        nm = frame.apply_dirs(nm)
        if flip_y:
            nm = nm * np.array([1.0, -1.0, 1.0])
        cols.append(nm)
    rows = np.concatenate(cols, axis=1)
    if n > max_points:
        rows = rows[fps_indices(xyz, max_points)]
    return rows, link_vec


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class StageSpec:
    """One set-abstraction stage: sampling, grouping, shared MLP widths."""

    num_centroids: int
    radius: float  # grouping radius in canonical units
    max_group: int
    widths: tuple

    def __post_init__(self) -> None:
        if self.num_centroids < 1 or self.max_group < 1 or self.radius <= 0:
            raise ValueError("stage parameters must be positive")
        if not self.widths:
            raise ValueError("stage needs at least one layer width")


DEFAULT_STAGE1 = StageSpec(num_centroids=128, radius=0.1, max_group=32, widths=(64, 64, 128))
DEFAULT_STAGE2 = StageSpec(num_centroids=32, radius=0.3, max_group=32, widths=(128, 128, 256))
DEFAULT_HEAD = (256, 128, 64)


@dataclass(eq=False)
class GainModel:
    """Parameters and layout of the set encoder; output is one gain in dB."""

    feature_spec: FeatureSpec
    stage1: StageSpec
    stage2: StageSpec
    head_widths: tuple
    params: dict
    version: str = CHECKPOINT_VERSION

    def param_items(self):
        return list(self.params.items())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy_param_data(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def set_param_data(self, data: dict) -> None:
        for k, p in self.params.items():
            p.data = data[k].copy()
            p.grad = None


def _layer_dims(in_dim: int, widths: Sequence[int]):
    dims = [in_dim, *widths]
    return list(zip(dims[:-1], dims[1:]))


def init_gain_model(
    feature_spec: Optional[FeatureSpec] = None,
    stage1: StageSpec = DEFAULT_STAGE1,
    stage2: StageSpec = DEFAULT_STAGE2,
    head_widths: tuple = DEFAULT_HEAD,
    seed: int = 0,
) -> GainModel:
    """Fresh model with He-scaled weights; deterministic under seed."""
    spec = feature_spec or FeatureSpec()
    rng = np.random.default_rng(seed)
    params: dict = {}

    def add_mlp(prefix: str, in_dim: int, widths: Sequence[int]):
        for i, (fi, fo) in enumerate(_layer_dims(in_dim, widths)):
            params[f"{prefix}.w{i}"] = Tensor(
                rng.standard_normal((fi, fo)) * math.sqrt(2.0 / fi), needs_grad=True
            )
            params[f"{prefix}.b{i}"] = Tensor(np.zeros(fo), needs_grad=True)

    add_mlp("s1", 3 + spec.point_dim, stage1.widths)
    add_mlp("s2", 3 + stage1.widths[-1], stage2.widths)
    add_mlp("head", stage2.widths[-1] + spec.link_dim, (*head_widths, 1))
    params["absence"] = Tensor(np.zeros((1, stage2.widths[-1])), needs_grad=True)
    return GainModel(spec, stage1, stage2, tuple(head_widths), params)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass(eq=False)
class _SampleStructure:
    """Constant grouping geometry of one input set, reusable across epochs."""

    empty: bool
    r1: Optional[np.ndarray] = None  # (M1, 3 + F) stage-1 member rows
    starts1: Optional[np.ndarray] = None
    rel2: Optional[np.ndarray] = None  # (M2, 3)
    gidx2: Optional[np.ndarray] = None  # (M2,) into this sample's stage-1 centroids
    starts2: Optional[np.ndarray] = None
    s1: int = 0
    s2: int = 0


def _group(src_xyz: np.ndarray, centroids: np.ndarray, radius: float, max_group: int):
    """Ball grouping: members within radius, nearest-first, capped.

    Ties in distance resolve by source row order (stable sort), which is
    canonical because input rows are sorted. Every group contains at least
    its own centroid.
    """
    d2 = ((centroids[:, None, :] - src_xyz[None, :, :]) ** 2).sum(axis=2)
    r2 = radius * radius
    cap = min(max_group, src_xyz.shape[0])
    order = np.argsort(d2, axis=1, kind="stable")[:, :cap]
    within = np.take_along_axis(d2, order, axis=1) <= r2
    within[:, 0] = True  # the centroid itself, distance zero
    counts = within.sum(axis=1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    members = order[within]
    return members, starts.astype(np.int64), counts


def build_structure(model: GainModel, point_feats: np.ndarray) -> _SampleStructure:
    """Precompute sampling/grouping geometry for one feature matrix.

    Rows are sorted and exact duplicates collapsed first: the encoder is a
    set function, so this changes nothing semantically but makes the
    output bit-identical under input permutation and duplication.
    """
    rows = np.asarray(point_feats, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("point features must be a 2D matrix")
    if rows.shape[0] == 0:
        return _SampleStructure(empty=True)
    rows = np.unique(rows, axis=0)
    n = rows.shape[0]
    xyz = rows[:, :3]

    s1 = min(model.stage1.num_centroids, n)
    c1 = fps_indices(xyz, s1)
    cxyz1 = xyz[c1]
    m1, starts1, counts1 = _group(xyz, cxyz1, model.stage1.radius, model.stage1.max_group)
    seg1 = np.repeat(np.arange(s1), counts1)
    rel1 = (xyz[m1] - cxyz1[seg1]) / model.stage1.radius
    r1 = np.concatenate([rel1, rows[m1]], axis=1)

    s2 = min(model.stage2.num_centroids, s1)
    c2 = fps_indices(cxyz1, s2)
    cxyz2 = cxyz1[c2]
    m2, starts2, counts2 = _group(cxyz1, cxyz2, model.stage2.radius, model.stage2.max_group)
    seg2 = np.repeat(np.arange(s2), counts2)
    rel2 = (cxyz1[m2] - cxyz2[seg2]) / model.stage2.radius

    return _SampleStructure(
        empty=False,
        r1=r1,
        starts1=starts1,
        rel2=rel2,
        gidx2=m2.astype(np.int64),
        starts2=starts2,
        s1=s1,
        s2=s2,
    )


def _mlp(h: Tensor, model: GainModel, prefix: str, n_layers: int, relu_last: bool) -> Tensor:
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, model.params[f"{prefix}.w{i}"]), model.params[f"{prefix}.b{i}"])
        if relu_last or i < n_layers - 1:
            h = ad.relu(h)
    return h


def _forward_batch(model: GainModel, structures: List[_SampleStructure], link_mat: np.ndarray) -> Tensor:
    """Batched forward over precomputed structures; returns a (B, 1) tensor."""
    link_mat = np.asarray(link_mat, dtype=np.float64).reshape(len(structures), -1)
    if link_mat.shape[1] != model.feature_spec.link_dim:
        raise ValueError(
            f"link features must have length {model.feature_spec.link_dim}"
        )
    nonempty = [i for i, s in enumerate(structures) if not s.empty]
    empty = [i for i, s in enumerate(structures) if s.empty]

    pooled_parts = []
    if nonempty:
        r1_all, starts1_all, rel2_all, gidx2_all, starts2_all, sample_starts = [], [], [], [], [], []
        m1_off = s1_off = m2_off = s2_off = 0
        for i in nonempty:
            s = structures[i]
            r1_all.append(s.r1)
            starts1_all.append(s.starts1 + m1_off)
            rel2_all.append(s.rel2)
            gidx2_all.append(s.gidx2 + s1_off)
            starts2_all.append(s.starts2 + m2_off)
            sample_starts.append(s2_off)
            m1_off += s.r1.shape[0]
            s1_off += s.s1
            m2_off += s.rel2.shape[0]
            s2_off += s.s2
        h = Tensor(np.concatenate(r1_all, axis=0))
        h = _mlp(h, model, "s1", len(model.stage1.widths), relu_last=True)
        h1 = ad.segment_max(h, np.concatenate(starts1_all))
        g = ad.gather_rows(h1, np.concatenate(gidx2_all))
        x2 = ad.concat_cols([Tensor(np.concatenate(rel2_all, axis=0)), g])
        x2 = _mlp(x2, model, "s2", len(model.stage2.widths), relu_last=True)
        h2 = ad.segment_max(x2, np.concatenate(starts2_all))
        pooled_parts.append(ad.segment_max(h2, np.array(sample_starts, dtype=np.int64)))
    if empty:
        pooled_parts.append(
            ad.gather_rows(model.params["absence"], np.zeros(len(empty), dtype=np.int64))
        )
    pooled = pooled_parts[0] if len(pooled_parts) == 1 else ad.concat_rows(pooled_parts)
    if nonempty and empty:
        inv = np.empty(len(structures), dtype=np.int64)
        inv[nonempty] = np.arange(len(nonempty))
        inv[empty] = len(nonempty) + np.arange(len(empty))
        pooled = ad.gather_rows(pooled, inv)
        order = np.arange(len(structures))
    elif empty:
        order = empty
    else:
        order = nonempty
    head_in = ad.concat_cols([pooled, Tensor(link_mat[order])])
    return _mlp(head_in, model, "head", len(model.head_widths) + 1, relu_last=False)


def forward(model: GainModel, point_feats: np.ndarray, link_feats: np.ndarray) -> float:
    """Gain in dB for one selected point set plus link features.

    Deterministic; exactly invariant to the order (and duplication) of
    point rows. An empty set routes a learned absence embedding through the
    head instead of pooled features.
    """
    st = build_structure(model, point_feats)
    out = _forward_batch(model, [st], np.asarray(link_feats, dtype=np.float64).reshape(1, -1))
    val = float(out.data[0, 0])
    if not math.isfinite(val):
        raise RuntimeError("forward produced a non-finite gain")
    return val


# ---------------------------------------------------------------------------
# Loss, gradient check


def _loss_tensor(model: GainModel, structures, link_mat, targets) -> Tensor:
    pred = _forward_batch(model, structures, link_mat)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    diff = ad.sub(pred, Tensor(t))
    return ad.mean_all(ad.mul(diff, diff))


def loss(model: GainModel, batch) -> float:
    """Mean squared error in dB over the masked samples of a batch.

    batch rows are (point_feats, link_feats, target_db, mask); samples with
    a false mask are excluded. An all-masked batch is an error.
    """
    kept = [(p, l, t) for (p, l, t, m) in batch if m]
    if not kept:
        raise ValueError("all samples in the batch are masked out")
    structures = [build_structure(model, p) for p, _, _ in kept]
    link_mat = np.stack([np.asarray(l, dtype=np.float64) for _, l, _ in kept])
    targets = np.array([t for _, _, t in kept])
    return float(_loss_tensor(model, structures, link_mat, targets).data)


def grad_check(
    model: GainModel,
    sample,
    h: Optional[float] = None,
    n_params: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Checks at least n_params randomly chosen parameters of the squared
    error on one sample; h defaults to 1e-4 of each parameter's scale.
    """
    point_feats, link_feats, target = sample
    st = build_structure(model, point_feats)
    link_mat = np.asarray(link_feats, dtype=np.float64).reshape(1, -1)
    targets = np.array([target])

    for p in model.params.values():
        p.grad = None
    out = _loss_tensor(model, [st], link_mat, targets)
    ad.backward(out)
    grads = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in model.params.items()
    }
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise RuntimeError("non-finite gradient")

    entries = []
    for name, p in model.param_items():
        entries.extend((name, i) for i in range(p.data.size))
    rng = np.random.default_rng(seed)
    n_check = min(n_params, len(entries))
    picks = rng.choice(len(entries), size=n_check, replace=False)

    # Finite differences do not need the tape.
    for p in model.params.values():
        p.needs_grad = False
    try:
        max_rel = 0.0
        for pick in picks:
            name, flat = entries[pick]
            arr = model.params[name].data
            orig = arr.flat[flat]
            step = h if h is not None else 1e-4 * max(1.0, abs(orig))
            arr.flat[flat] = orig + step
            f_plus = float(_loss_tensor(model, [st], link_mat, targets).data)
            arr.flat[flat] = orig - step
            f_minus = float(_loss_tensor(model, [st], link_mat, targets).data)
            arr.flat[flat] = orig
            g_fd = (f_plus - f_minus) / (2.0 * step)
            g_ad = grads[name].flat[flat]
            rel = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
            max_rel = max(max_rel, rel)
    finally:
        for p in model.params.values():
            p.needs_grad = True
    return max_rel


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    """First-order training settings; seed fixes all stochasticity."""

    step_size: float = 1e-3
    adaptive: bool = True  # per-parameter second-moment scaling
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    mask_aware: bool = True
    patience: int = 50

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size, max_epochs, patience must be non-negative")


@dataclass
class TrainData:
    """Everything training needs: measurements, environment, selection options."""

    train: MeasurementSet
    index: SpatialIndex
    val: Optional[MeasurementSet] = None
    max_points: int = 512
    context_bins: int = 0


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite model state."""

    def __init__(self, model: GainModel, history: list):
        super().__init__("training diverged: non-finite loss")
        self.model = model
        self.history = history


def _prepare_samples(model: GainModel, ms: MeasurementSet, data: TrainData, mask_aware: bool):
    structures, link_rows, targets = [], [], []
    bins = ms.bins
    if bins is None:
        raise ValueError("measurement set holds no PDP records")
    for link, pdp in ms.pdp_records:
        sels = select_all(data.index, link, bins)
        for k in range(bins.num_bins):
            if mask_aware and not pdp.mask[k]:
                continue
            sel = merge_selections(sels, k, data.context_bins) if data.context_bins else sels[k]
            rows, lvec = featurize(sel, link, bins, model.feature_spec, data.max_points)
            structures.append(build_structure(model, rows))
            link_rows.append(lvec)
            targets.append(float(pdp.gains_db[k]))
    if not structures:
        raise ValueError("no usable training samples after masking")
    return structures, np.stack(link_rows), np.array(targets)


def _eval_mse(model: GainModel, structures, link_mat, targets, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(structures), chunk):
        e = min(s + chunk, len(structures))
        t = _loss_tensor(model, structures[s:e], link_mat[s:e], targets[s:e])
        total += float(t.data) * (e - s)
    return total / len(structures)


def train(
    model: GainModel,
    data: TrainData,
    cfg: TrainConfig,
    checkpoint_path=None,
    history_path=None,
):
    """Fit the model; returns (model, history).

    history rows are (epoch, train_mse, val_mse) with epoch 0 the untrained
    state; losses are full-batch evaluations after each epoch's updates.
    The returned model carries the parameters of the best epoch by train
    MSE, so its loss never exceeds the initial one. Deterministic under
    cfg.seed.
    """
    if len(data.train) == 0:
        raise ValueError("empty dataset")
    structures, link_mat, targets = _prepare_samples(model, data.train, data, cfg.mask_aware)
    val = None
    if data.val is not None and len(data.val.pdp_records):
        val = _prepare_samples(model, data.val, data, cfg.mask_aware)

    rng = np.random.default_rng(cfg.seed)
    n = len(structures)
    m_state = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    v_state = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    step = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def epoch_row(epoch: int):
        train_mse = _eval_mse(model, structures, link_mat, targets)
        val_mse = _eval_mse(model, val[0], val[1], val[2]) if val else math.nan
        return (epoch, train_mse, val_mse)

    history = [epoch_row(0)]
    best_mse = history[0][1]
    best_params = model.copy_param_data()
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            for p in model.params.values():
                p.grad = None
            out = _loss_tensor(
                model, [structures[i] for i in idx], link_mat[idx], targets[idx]
            )
            if not math.isfinite(float(out.data)):
                model.set_param_data(best_params)
                raise TrainingDiverged(model, history)
            ad.backward(out)
            step += 1
            for k, p in model.params.items():
                g = p.grad
                if g is None:
                    continue
                if cfg.adaptive:
                    m_state[k] = beta1 * m_state[k] + (1 - beta1) * g
                    v_state[k] = beta2 * v_state[k] + (1 - beta2) * g * g
                    m_hat = m_state[k] / (1 - beta1**step)
                    v_hat = v_state[k] / (1 - beta2**step)
                    p.data = p.data - cfg.step_size * m_hat / (np.sqrt(v_hat) + eps)
                else:
                    p.data = p.data - cfg.step_size * g
        row = epoch_row(epoch)
        history.append(row)
        if not math.isfinite(row[1]):
            model.set_param_data(best_params)
            raise TrainingDiverged(model, history)
        if row[1] < best_mse - 1e-12:
            best_mse = row[1]
            best_params = model.copy_param_data()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    model.set_param_data(best_params)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if history_path is not None:
        write_history_csv(history, history_path)
    return model, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, train_mse, val_mse in history:
            w.writerow([epoch, repr(train_mse), repr(val_mse)])


# ---------------------------------------------------------------------------
# Prediction


def predict_pdp(
    model: GainModel,
    index: SpatialIndex,
    link: Link,
    bins: ToaBinSpec,
    max_points: int = 512,
    context_bins: int = 0,
    floor_db: float = NOISE_FLOOR_DB,
) -> Pdp:
    """Predict a full PDP: one forward per ToA bin, batched.

    The mask marks bins whose predicted gain clears the noise floor; bin 0
    is handled like any other (the direct-path tap is learned, not
    hardcoded).
    """
    sels = select_all(index, link, bins)
    structures, link_rows = [], []
    for k in range(bins.num_bins):
        sel = merge_selections(sels, k, context_bins) if context_bins else sels[k]
        rows, lvec = featurize(sel, link, bins, model.feature_spec, max_points)
        structures.append(build_structure(model, rows))
        link_rows.append(lvec)
    out = _forward_batch(model, structures, np.stack(link_rows))
    gains = out.data[:, 0].copy()
    if not np.all(np.isfinite(gains)):
        raise RuntimeError("prediction produced non-finite gains")
    mask = gains >= floor_db
    return Pdp(bins, gains, mask)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: GainModel, path) -> None:
    """Versioned JSON checkpoint: layout descriptor plus flat weight arrays."""
    doc = {
        "version": model.version,
        "feature_spec": {
            "num_classes": model.feature_spec.num_classes,
            "use_color": model.feature_spec.use_color,
            "use_normals": model.feature_spec.use_normals,
            "scene_scale_m": model.feature_spec.scene_scale_m,
        },
        "stage1": _stage_doc(model.stage1),
        "stage2": _stage_doc(model.stage2),
        "head_widths": list(model.head_widths),
        "params": {
            k: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for k, p in model.params.items()
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def _stage_doc(stage: StageSpec) -> dict:
    return {
        "num_centroids": stage.num_centroids,
        "radius": stage.radius,
        "max_group": stage.max_group,
        "widths": list(stage.widths),
    }


def _stage_from_doc(doc: dict) -> StageSpec:
    return StageSpec(
        num_centroids=doc["num_centroids"],
        radius=doc["radius"],
        max_group=doc["max_group"],
        widths=tuple(doc["widths"]),
    )


def load_checkpoint(path) -> GainModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec = FeatureSpec(**doc["feature_spec"])
    model = init_gain_model(
        feature_spec=spec,
        stage1=_stage_from_doc(doc["stage1"]),
        stage2=_stage_from_doc(doc["stage2"]),
        head_widths=tuple(doc["head_widths"]),
    )
    for k, p in model.params.items():
        entry = doc["params"][k]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        p.data = arr
    return model
