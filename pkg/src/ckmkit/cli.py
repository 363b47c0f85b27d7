"""Command-line front end: ckm synth|select|train|eval|map|trace|krige|import.

Configuration is plain key=value under [section] headers (INI); flags
override file values, --set section.key=value overrides anything. Every
command is deterministic given identical config and seed: re-running
overwrites outputs with identical bytes.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 dataset schema mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import gainnet as gn
from .baselines import MaterialTable, TraceConfig, fit_variogram, krige_map, trace_pdp
from .bundle import (
    Bundle,
    DatasetSchemaError,
    import_released_dataset,
    read_bundle,
    scene_from_meta,
    scene_meta,
    write_bundle,
)
from .channel import (
    GridSpec,
    Link,
    Pdp,
    ScalarMap,
    ToaBinSpec,
    mean_abs_err_db,
    pdp_to_rss,
    rmse_db,
    write_esri_ascii,
    write_pdp_csv,
)
from .cloud import SpatialIndex, load_cloud, save_xyzrgbl
from .selector import select_all
from .synth import (
    BoxSpec,
    SceneSpec,
    TreeSpec,
    blockage_oracle,
    synth_dataset,
    two_ray_oracle,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAIN = 3
EXIT_SCHEMA = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All knobs with documented defaults; see README for the file format."""

    # [paths]
    bundle: str = ""
    cloud: str = ""
    model: str = ""
    materials: str = ""
    out: str = "out"
    dataset_in: str = ""
    # [bins]
    bin_width_ns: float = 0.6
    num_bins: int = 32
    # [selector]
    max_points: int = 512
    context_bins: int = 0
    index_cell_m: float = 2.0
    # [features]
    num_classes: int = 7
    use_color: bool = False
    use_normals: bool = False
    scene_scale_m: float = 100.0
    # [model]
    s1_centroids: int = 128
    s1_radius: float = 0.1
    s1_group: int = 32
    s1_widths: str = "64,64,128"
    s2_centroids: int = 32
    s2_radius: float = 0.3
    s2_group: int = 32
    s2_widths: str = "128,128,256"
    head_widths: str = "256,128,64"
    # [train]
    step_size: float = 1e-3
    adaptive: bool = True
    batch_size: int = 32
    max_epochs: int = 200
    mask_aware: bool = True
    patience: int = 50
    # [grid]
    grid_origin_x: float = 0.0
    grid_origin_y: float = 0.0
    grid_nx: int = 20
    grid_ny: int = 20
    grid_cell: float = 3.0
    grid_height: float = 1.5
    # [synth]
    n_links: int = 96
    scene_sx: float = 60.0
    scene_sy: float = 60.0
    scene_spacing: float = 1.0
    buildings: str = ""  # "x,y,z,sx,sy,sz,spacing|..." pipe-separated boxes
    trees: str = ""  # "x,y,z,radius,count|..."
    oracle: str = "two_ray"  # or two_ray_blockage
    gamma_db: float = -9.0
    block_db: float = -25.0
    tx: str = "30,30,10"
    rx: str = ""
    carrier_hz: float = 2.4e9
    tx_power_dbm: float = 30.0
    rx_height: float = 1.5
    min_range: float = 5.0
    # [run]
    seed: int = 0
    threads: int = 0  # 0 = available parallelism
    floor_db: float = -130.0
    emit_clouds: bool = False


_SECTIONS = {
    "paths": ["bundle", "cloud", "model", "materials", "out", "dataset_in"],
    "bins": ["bin_width_ns", "num_bins"],
    "selector": ["max_points", "context_bins", "index_cell_m"],
    "features": ["num_classes", "use_color", "use_normals", "scene_scale_m"],
    "model": [
        "s1_centroids", "s1_radius", "s1_group", "s1_widths",
        "s2_centroids", "s2_radius", "s2_group", "s2_widths", "head_widths",
    ],
    "train": ["step_size", "adaptive", "batch_size", "max_epochs", "mask_aware", "patience"],
    "grid": ["grid_origin_x", "grid_origin_y", "grid_nx", "grid_ny", "grid_cell", "grid_height"],
    "synth": [
        "n_links", "scene_sx", "scene_sy", "scene_spacing", "buildings", "trees",
        "oracle", "gamma_db", "block_db", "tx", "rx", "carrier_hz", "tx_power_dbm",
        "rx_height", "min_range",
    ],
    "run": ["seed", "threads", "floor_db", "emit_clouds"],
}
_FIELD_SECTION = {f: s for s, names in _SECTIONS.items() for f in names}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    try:
        if ftype in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {_FIELD_SECTION[name]}.{name}: {e}") from None


def load_config(path: Optional[str], overrides: List[str], flags: dict) -> RunConfig:
    cfg = RunConfig()
    if path:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(cfg, key, _coerce(key, raw))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {target}")
        setattr(cfg, key, _coerce(key, raw))
    for key, value in flags.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _require(value: str, name: str) -> str:
    if not value:
        raise ConfigError(f"missing required setting {name}")
    return value


def _parse_vec3(raw: str, name: str) -> np.ndarray:
    parts = raw.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{name} must be x,y,z, got {raw!r}")
    try:
        return np.array([float(v) for v in parts])
    except ValueError:
        raise ConfigError(f"{name} must be numeric x,y,z, got {raw!r}") from None


def _parse_widths(raw: str, name: str) -> tuple:
    try:
        widths = tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated integers") from None
    if not widths:
        raise ConfigError(f"{name} must not be empty")
    return widths


def _scene_from_config(cfg: RunConfig) -> SceneSpec:
    boxes = []
    if cfg.buildings:
        for chunk in cfg.buildings.split("|"):
            vals = [v for v in chunk.split(",") if v.strip()]
            if len(vals) != 7:
                raise ConfigError(
                    "synth.buildings entries must be x,y,z,sx,sy,sz,spacing"
                )
            nums = [float(v) for v in vals]
            boxes.append(BoxSpec(corner=tuple(nums[:3]), size=tuple(nums[3:6]), spacing=nums[6]))
    trees = []
    if cfg.trees:
        for chunk in cfg.trees.split("|"):
            vals = [v for v in chunk.split(",") if v.strip()]
            if len(vals) != 5:
                raise ConfigError("synth.trees entries must be x,y,z,radius,count")
            trees.append(
                TreeSpec(
                    center=tuple(float(v) for v in vals[:3]),
                    radius=float(vals[3]),
                    count=int(float(vals[4])),
                )
            )
    return SceneSpec(
        ground_size=(cfg.scene_sx, cfg.scene_sy),
        ground_spacing=cfg.scene_spacing,
        boxes=tuple(boxes),
        trees=tuple(trees),
        seed=cfg.seed,
    )


def _bins_from_config(cfg: RunConfig) -> ToaBinSpec:
    try:
        return ToaBinSpec(num_bins=cfg.num_bins, bin_width_ns=cfg.bin_width_ns)
    except ValueError as e:
        raise ConfigError(f"bins: {e}") from None


def _grid_from_config(cfg: RunConfig) -> GridSpec:
    try:
        return GridSpec(
            origin=(cfg.grid_origin_x, cfg.grid_origin_y),
            cell_size=cfg.grid_cell,
            nx=cfg.grid_nx,
            ny=cfg.grid_ny,
            height_m=cfg.grid_height,
        )
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from None


def _feature_spec(cfg: RunConfig) -> gn.FeatureSpec:
    return gn.FeatureSpec(
        num_classes=cfg.num_classes,
        use_color=cfg.use_color,
        use_normals=cfg.use_normals,
        scene_scale_m=cfg.scene_scale_m,
    )


def _model_from_config(cfg: RunConfig) -> gn.GainModel:
    return gn.init_gain_model(
        feature_spec=_feature_spec(cfg),
        stage1=gn.StageSpec(cfg.s1_centroids, cfg.s1_radius, cfg.s1_group, _parse_widths(cfg.s1_widths, "model.s1_widths")),
        stage2=gn.StageSpec(cfg.s2_centroids, cfg.s2_radius, cfg.s2_group, _parse_widths(cfg.s2_widths, "model.s2_widths")),
        head_widths=_parse_widths(cfg.head_widths, "model.head_widths"),
        seed=cfg.seed,
    )


def _oracle_from_config(cfg: RunConfig, scene: SceneSpec):
    if cfg.oracle == "two_ray":
        return two_ray_oracle(cfg.gamma_db)
    if cfg.oracle == "two_ray_blockage":
        return blockage_oracle(scene, cfg.gamma_db, cfg.block_db)
    raise ConfigError(f"unknown synth.oracle {cfg.oracle!r}")


def _materials(cfg: RunConfig, class_table) -> MaterialTable:
    if cfg.materials:
        return MaterialTable.load_csv(cfg.materials, class_table)
    return MaterialTable.default(class_table)


def _threads(cfg: RunConfig) -> int:
    return cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items, threads: int):
    """Apply fn to items preserving order; thread count never changes results."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: RunConfig) -> int:
    scene = _scene_from_config(cfg)
    bins = _bins_from_config(cfg)
    oracle = _oracle_from_config(cfg, scene)
    tx = _parse_vec3(cfg.tx, "synth.tx")
    cloud, records = synth_dataset(
        scene,
        cfg.n_links,
        bins,
        oracle,
        seed=cfg.seed,
        tx=tx,
        carrier_hz=cfg.carrier_hz,
        tx_power_dbm=cfg.tx_power_dbm,
        rx_height_m=cfg.rx_height,
        min_range_m=cfg.min_range,
    )
    meta = scene_meta(scene, cfg.oracle, gamma_db=cfg.gamma_db, block_db=cfg.block_db)
    meta["link"] = {
        "tx": cfg.tx,
        "carrier_hz": repr(cfg.carrier_hz),
        "tx_power_dbm": repr(cfg.tx_power_dbm),
    }
    bundle = Bundle(cloud, records, meta)
    out = _out_dir(cfg)
    write_bundle(bundle, out)
    counts = bundle.split_counts()
    print(
        f"wrote bundle to {out}: {len(records)} links "
        f"({counts.get('train', 0)} train / {counts.get('test', 0)} test), "
        f"{len(cloud)} cloud points"
    )
    return EXIT_OK


def _load_environment(cfg: RunConfig):
    """Cloud plus index from either an explicit cloud file or a bundle."""
    if cfg.cloud:
        cloud = load_cloud(cfg.cloud)
        return None, cloud, SpatialIndex(cloud, cfg.index_cell_m)
    bundle = read_bundle(_require(cfg.bundle, "paths.bundle"))
    return bundle, bundle.cloud, SpatialIndex(bundle.cloud, cfg.index_cell_m)


def cmd_select(cfg: RunConfig) -> int:
    _, cloud, index = _load_environment(cfg)
    bins = _bins_from_config(cfg)
    tx = _parse_vec3(_require(cfg.tx, "synth.tx"), "synth.tx")
    rx = _parse_vec3(_require(cfg.rx, "synth.rx"), "synth.rx")
    link = Link(tx, rx, cfg.carrier_hz, cfg.tx_power_dbm)
    selections = select_all(index, link, bins)
    out = _out_dir(cfg)
    with open(out / "bin_counts.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "count"])
        for sel in selections:
            w.writerow([sel.k, len(sel)])
    total = sum(len(s) for s in selections)
    print(f"link LOS {link.los_m!r} m; {total} of {len(cloud)} points in {bins.num_bins} bins")
    for sel in selections:
        print(f"bin {sel.k}: {len(sel)}")
    if cfg.emit_clouds:
        for sel in selections:
            save_xyzrgbl(sel.points, out / f"bin_{sel.k:03d}.xyzrgbl")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    bundle = read_bundle(_require(cfg.bundle, "paths.bundle"))
    if bundle.bins is None:
        raise ConfigError("bundle holds no PDP records")
    index = SpatialIndex(bundle.cloud, cfg.index_cell_m)
    if cfg.model and Path(cfg.model).exists():
        model = gn.load_checkpoint(cfg.model)
    else:
        model = _model_from_config(cfg)
    data = gn.TrainData(
        train=bundle.measurements("train"),
        index=index,
        val=bundle.measurements("test"),
        max_points=cfg.max_points,
        context_bins=cfg.context_bins,
    )
    train_cfg = gn.TrainConfig(
        step_size=cfg.step_size,
        adaptive=cfg.adaptive,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        seed=cfg.seed,
        mask_aware=cfg.mask_aware,
        patience=cfg.patience,
    )
    out = _out_dir(cfg)
    try:
        model, history = gn.train(
            model,
            data,
            train_cfg,
            checkpoint_path=out / "model.json",
            history_path=out / "history.csv",
        )
    except gn.TrainingDiverged as e:
        gn.save_checkpoint(e.model, out / "model.json")
        gn.write_history_csv(e.history, out / "history.csv")
        print(f"training diverged after {len(e.history) - 1} epochs", file=sys.stderr)
        return EXIT_TRAIN
    print(
        f"trained {len(history) - 1} epochs: train MSE "
        f"{history[0][1]!r} -> {min(h[1] for h in history)!r} dB^2; wrote {out / 'model.json'}"
    )
    return EXIT_OK


def _eval_methods(cfg: RunConfig, bundle: Bundle, index: SpatialIndex):
    """Per-method predicted PDPs for the test split; returns {method: {id: Pdp}}."""
    bins = bundle.bins
    test = [r for r in bundle.records if r.split == "test"]
    methods: dict = {}
    if cfg.model:
        if not Path(cfg.model).exists():
            print(f"warning: checkpoint {cfg.model} missing; omitting proposed", file=sys.stderr)
        else:
            model = gn.load_checkpoint(cfg.model)
            preds = _parallel_map(
                lambda r: gn.predict_pdp(
                    model, index, r.link, bins,
                    max_points=cfg.max_points,
                    context_bins=cfg.context_bins,
                    floor_db=cfg.floor_db,
                ),
                test,
                _threads(cfg),
            )
            methods["proposed"] = {r.id: p for r, p in zip(test, preds)}
    else:
        print("warning: no checkpoint configured; omitting proposed", file=sys.stderr)
    materials = _materials(cfg, bundle.cloud.class_table)
    preds = _parallel_map(
        lambda r: trace_pdp(index, r.link, bins, materials),
        test,
        _threads(cfg),
    )
    methods["raytrace"] = {r.id: p for r, p in zip(test, preds)}
    return methods, test


def cmd_eval(cfg: RunConfig) -> int:
    bundle = read_bundle(_require(cfg.bundle, "paths.bundle"))
    if bundle.bins is None:
        raise ConfigError("bundle holds no PDP records")
    index = SpatialIndex(bundle.cloud, cfg.index_cell_m)
    methods, test = _eval_methods(cfg, bundle, index)
    out = _out_dir(cfg)

    abs_errors: dict = {m: [] for m in methods}
    with open(out / "errors.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["link_id", "bin", "method", "pred_db", "truth_db", "abs_err_db"])
        for r in test:
            for method in sorted(methods):
                pred = methods[method][r.id]
                valid = pred.mask & r.pdp.mask
                for k in np.nonzero(valid)[0]:
                    err = abs(float(pred.gains_db[k] - r.pdp.gains_db[k]))
                    abs_errors[method].append(err)
                    w.writerow(
                        [r.id, int(k), method,
                         repr(float(pred.gains_db[k])), repr(float(r.pdp.gains_db[k])), repr(err)]
                    )
    for r in test:
        with open(out / f"pdp_{r.id}.csv", "w", newline="") as f:
            w = csv.writer(f)
            names = sorted(methods)
            w.writerow(["bin", "toa_ns", "truth_db", "truth_mask"]
                       + [c for m in names for c in (f"{m}_db", f"{m}_mask")])
            for k in range(bundle.bins.num_bins):
                row = [
                    k,
                    repr(k * bundle.bins.bin_width_ns),
                    repr(float(r.pdp.gains_db[k])),
                    int(r.pdp.mask[k]),
                ]
                for m in names:
                    p = methods[m][r.id]
                    row += [repr(float(p.gains_db[k])), int(p.mask[k])]
                w.writerow(row)

    rows = []
    for method, errs in abs_errors.items():
        if not errs:
            print(f"warning: {method} has no comparable bins", file=sys.stderr)
            continue
        e = np.array(errs)
        rows.append((method, float(e.mean()), float(np.sqrt((e**2).mean())), len(e)))
    rows.sort(key=lambda t: t[1])
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "mean_abs_err_db", "rmse_db", "n_taps"])
        for method, mean_err, rms, n in rows:
            w.writerow([method, repr(mean_err), repr(rms), n])
    with open(out / "quantiles.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "q0", "q25", "q50", "q75", "q100"])
        for method in sorted(abs_errors):
            if abs_errors[method]:
                q = np.percentile(abs_errors[method], [0, 25, 50, 75, 100])
                w.writerow([method] + [repr(float(v)) for v in q])
    print(f"{'method':<12} {'mean|err| dB':>14} {'RMSE dB':>10} {'taps':>6}")
    for method, mean_err, rms, n in rows:
        print(f"{method:<12} {mean_err:>14.4f} {rms:>10.4f} {n:>6}")
    return EXIT_OK


def _truth_rss_fn(cfg: RunConfig, bundle: Bundle):
    """Oracle RSS at a position, when the bundle metadata names an oracle."""
    if "oracle" not in bundle.meta or "link" not in bundle.meta:
        return None
    scene = scene_from_meta(bundle.meta)
    name = bundle.meta["oracle"]["name"]
    gamma = float(bundle.meta["oracle"].get("gamma_db", cfg.gamma_db))
    block = float(bundle.meta["oracle"].get("block_db", cfg.block_db))
    if name == "two_ray":
        oracle = two_ray_oracle(gamma)
    elif name == "two_ray_blockage":
        oracle = blockage_oracle(scene, gamma, block)
    else:
        return None
    tx = _parse_vec3(bundle.meta["link"]["tx"], "meta link.tx")
    carrier = float(bundle.meta["link"]["carrier_hz"])
    power = float(bundle.meta["link"]["tx_power_dbm"])
    bins = bundle.bins

    def fn(pos2d, height):
        link = Link(tx, [pos2d[0], pos2d[1], height], carrier, power)
        return pdp_to_rss(oracle(link, bins), power)

    return fn


def _rss_samples(bundle: Bundle, split: str = "train"):
    positions, values = [], []
    for r in bundle.records:
        if r.split != split:
            continue
        rss = pdp_to_rss(r.pdp, r.link.tx_power_dbm)
        if rss is None:
            continue
        positions.append(r.link.rx[:2])
        values.append(rss)
    return np.array(positions), np.array(values)


def _rss_map_from_pdps(pdps, grid: GridSpec, tx_power: float, nodata: float = -9999.0) -> ScalarMap:
    vals = []
    for p in pdps:
        rss = pdp_to_rss(p, tx_power)
        vals.append(nodata if rss is None else rss)
    return grid.to_map(np.array(vals), nodata)


def cmd_map(cfg: RunConfig) -> int:
    bundle = read_bundle(_require(cfg.bundle, "paths.bundle"))
    if bundle.bins is None:
        raise ConfigError("bundle holds no PDP records")
    bins = bundle.bins
    index = SpatialIndex(bundle.cloud, cfg.index_cell_m)
    grid = _grid_from_config(cfg)
    out = _out_dir(cfg)
    ref = bundle.records[0].link
    centers = grid.cell_centers()
    cell_links = [
        Link(ref.tx, [c[0], c[1], grid.height_m], ref.carrier_hz, ref.tx_power_dbm)
        for c in centers
    ]

    maps: dict = {}
    if cfg.model and Path(cfg.model).exists():
        model = gn.load_checkpoint(cfg.model)
        pdps = _parallel_map(
            lambda link: gn.predict_pdp(
                model, index, link, bins,
                max_points=cfg.max_points,
                context_bins=cfg.context_bins,
                floor_db=cfg.floor_db,
            ),
            cell_links,
            _threads(cfg),
        )
        maps["proposed"] = _rss_map_from_pdps(pdps, grid, ref.tx_power_dbm)
    elif cfg.model:
        print(f"warning: checkpoint {cfg.model} missing; omitting proposed", file=sys.stderr)

    materials = _materials(cfg, bundle.cloud.class_table)
    pdps = _parallel_map(
        lambda link: trace_pdp(index, link, bins, materials), cell_links, _threads(cfg)
    )
    maps["raytrace"] = _rss_map_from_pdps(pdps, grid, ref.tx_power_dbm)

    positions, values = _rss_samples(bundle, "train")
    if len(positions) >= 8:
        vario = fit_variogram((positions, values))
        maps["kriging"] = krige_map((positions, values), vario, grid)
    else:
        print("warning: fewer than 8 RSS samples; omitting kriging", file=sys.stderr)

    for name, m in maps.items():
        write_esri_ascii(m, out / f"map_{name}.asc")

    truth_fn = _truth_rss_fn(cfg, bundle)
    if truth_fn is not None:
        truth_vals = [truth_fn(c, grid.height_m) for c in centers]
        truth = grid.to_map(
            np.array([v if v is not None else -9999.0 for v in truth_vals])
        )
        write_esri_ascii(truth, out / "map_truth.asc")
        rows = []
        for name in sorted(maps):
            try:
                rows.append((name, rmse_db(maps[name], truth)))
            except ValueError:
                print(f"warning: {name} map has no valid overlap with truth", file=sys.stderr)
        rows.sort(key=lambda t: t[1])
        with open(out / "map_summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "rmse_db"])
            for name, val in rows:
                w.writerow([name, repr(val)])
        for name, val in rows:
            print(f"{name:<12} RMSE {val:.4f} dB")
    else:
        print("no oracle metadata; wrote maps without a truth summary")
    return EXIT_OK


def cmd_trace(cfg: RunConfig) -> int:
    _, cloud, index = _load_environment(cfg)
    bins = _bins_from_config(cfg)
    tx = _parse_vec3(_require(cfg.tx, "synth.tx"), "synth.tx")
    rx = _parse_vec3(_require(cfg.rx, "synth.rx"), "synth.rx")
    link = Link(tx, rx, cfg.carrier_hz, cfg.tx_power_dbm)
    materials = _materials(cfg, cloud.class_table)
    pdp = trace_pdp(index, link, bins, materials)
    out = _out_dir(cfg)
    write_pdp_csv(pdp, out / "trace_pdp.csv")
    taps = np.nonzero(pdp.mask)[0]
    print(f"traced {len(taps)} taps over {len(cloud)} points")
    for k in taps:
        print(f"bin {int(k)}: {float(pdp.gains_db[k]):.2f} dB")
    return EXIT_OK


def cmd_krige(cfg: RunConfig) -> int:
    bundle = read_bundle(_require(cfg.bundle, "paths.bundle"))
    positions, values = _rss_samples(bundle, "train")
    if len(positions) < 8:
        raise ConfigError(f"kriging needs at least 8 RSS samples, got {len(positions)}")
    vario = fit_variogram((positions, values))
    grid = _grid_from_config(cfg)
    m = krige_map((positions, values), vario, grid)
    out = _out_dir(cfg)
    write_esri_ascii(m, out / "map_kriging.asc")
    print(
        f"variogram nugget {vario.nugget!r} sill {vario.sill!r} range {vario.range_!r}; "
        f"wrote {out / 'map_kriging.asc'}"
    )
    return EXIT_OK


def cmd_import(cfg: RunConfig) -> int:
    src = _require(cfg.dataset_in, "paths.dataset_in")
    out = _out_dir(cfg)
    bundle = import_released_dataset(src, out)
    bins = bundle.bins
    width = bins.bin_width_ns if bins else float("nan")
    print(
        f"imported {len(bundle.records)} links, {len(bundle.cloud)} points, "
        f"bin width {width!r} ns -> {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


_COMMANDS = {
    "synth": cmd_synth,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "trace": cmd_trace,
    "krige": cmd_krige,
    "import": cmd_import,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckm", description="Channel knowledge maps from 3D point clouds"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, help="override run.threads")
        p.add_argument("--out", help="output directory")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override any config value",
        )
        p.add_argument("--bundle", help="dataset bundle directory")
        p.add_argument("--cloud", help="point cloud file")
        p.add_argument("--model", help="model checkpoint path")
        p.add_argument("--materials", help="material table CSV")
        if name in ("select", "trace"):
            p.add_argument("--tx", help="transmitter x,y,z")
            p.add_argument("--rx", help="receiver x,y,z")
        if name == "select":
            p.add_argument("--emit-clouds", action="store_true", default=None,
                           help="write per-bin sub-clouds")
        if name == "import":
            p.add_argument("--in", dest="dataset_in", help="external dataset directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    flags = {
        key: getattr(args, key, None)
        for key in ("seed", "threads", "out", "bundle", "cloud", "model",
                    "materials", "tx", "rx", "dataset_in", "emit_clouds")
    }
    try:
        cfg = load_config(args.config, args.set, flags)
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetSchemaError as e:
        print(f"dataset schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
