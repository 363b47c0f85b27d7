"""Dataset bundle directory format and adapters.

A bundle holds one scene and its measurements:

    cloud.xyzrgbl      environment point cloud (XYZRGBL v1)
    links.csv          id,tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,carrier_hz,tx_power_dbm,split
    pdp/<id>.csv       one PDP per link (bin,toa_ns,gain_db,mask)
    meta.ini           optional provenance: oracle and scene parameters

The import adapter converts an external dataset directory into this
layout. Its expectations are documented in IMPORT_ASSUMPTIONS; anything
else fails loudly with the list of unrecognized files rather than
guessing. Unknown extra files are preserved in a sidecar directory.
"""

from __future__ import annotations

import configparser
import csv
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .channel import Link, MeasurementSet, Pdp, ToaBinSpec, read_pdp_csv, write_pdp_csv
from .cloud import PointCloud, load_cloud, save_xyzrgbl
from .synth import BoxSpec, SceneSpec, SynthLink

IMPORT_ASSUMPTIONS = """\
Expected external dataset layout (one directory):
  - exactly one point cloud file: cloud.xyzrgbl (XYZRGBL v1) or cloud.ply
    (ascii PLY with x,y,z,red,green,blue,label vertex properties);
  - links.csv with header id,tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,carrier_hz,
    tx_power_dbm[,split] (missing split defaults to "train");
  - pdp/<id>.csv per link with header bin,toa_ns,gain_db,mask; bin width
    is inferred from the toa_ns column (0.6 ns for the released sounder);
  - optional meta.ini; any other files are preserved unmodified in a
    sidecar/ directory of the output bundle.
"""

_LINK_FIELDS = [
    "id",
    "tx_x",
    "tx_y",
    "tx_z",
    "rx_x",
    "rx_y",
    "rx_z",
    "carrier_hz",
    "tx_power_dbm",
    "split",
]


class DatasetSchemaError(ValueError):
    """The directory does not match the documented bundle expectations."""


@dataclass
class Bundle:
    """In-memory dataset bundle."""

    cloud: PointCloud
    records: List[SynthLink]
    meta: dict = field(default_factory=dict)

    @property
    def bins(self) -> Optional[ToaBinSpec]:
        return self.records[0].pdp.bins if self.records else None

    def measurements(self, split: Optional[str] = None) -> MeasurementSet:
        recs = [
            (r.link, r.pdp)
            for r in self.records
            if split is None or r.split == split
        ]
        return MeasurementSet(pdp_records=recs)

    def split_counts(self) -> dict:
        out: dict = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out


def write_bundle(bundle: Bundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_xyzrgbl(bundle.cloud, path / "cloud.xyzrgbl")
    with open(path / "links.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_LINK_FIELDS)
        for r in bundle.records:
            w.writerow(
                [
                    r.id,
                    *(repr(float(v)) for v in r.link.tx),
                    *(repr(float(v)) for v in r.link.rx),
                    repr(float(r.link.carrier_hz)),
                    repr(float(r.link.tx_power_dbm)),
                    r.split,
                ]
            )
    pdp_dir = path / "pdp"
    pdp_dir.mkdir(exist_ok=True)
    for r in bundle.records:
        write_pdp_csv(r.pdp, pdp_dir / f"{r.id}.csv")
    if bundle.meta:
        _write_meta(bundle.meta, path / "meta.ini")


def read_bundle(path) -> Bundle:
    path = Path(path)
    cloud_file = path / "cloud.xyzrgbl"
    if not cloud_file.exists():
        raise DatasetSchemaError(f"missing {cloud_file}")
    links_file = path / "links.csv"
    if not links_file.exists():
        raise DatasetSchemaError(f"missing {links_file}")
    cloud = load_cloud(cloud_file)
    records = _read_links(path, links_file)
    meta_file = path / "meta.ini"
    meta = _read_meta(meta_file) if meta_file.exists() else {}
    return Bundle(cloud, records, meta)


def _read_links(path: Path, links_file: Path) -> List[SynthLink]:
    records = []
    with open(links_file, newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames is None or not set(_LINK_FIELDS[:-1]).issubset(r.fieldnames):
            raise DatasetSchemaError(
                f"{links_file}: expected columns {','.join(_LINK_FIELDS)}"
            )
        for row in r:
            link_id = int(row["id"])
            link = Link(
                tx=[float(row["tx_x"]), float(row["tx_y"]), float(row["tx_z"])],
                rx=[float(row["rx_x"]), float(row["rx_y"]), float(row["rx_z"])],
                carrier_hz=float(row["carrier_hz"]),
                tx_power_dbm=float(row["tx_power_dbm"]),
            )
            split = row.get("split") or "train"
            pdp_file = path / "pdp" / f"{link_id}.csv"
            if not pdp_file.exists():
                raise DatasetSchemaError(f"missing {pdp_file}")
            records.append(SynthLink(link_id, link, read_pdp_csv(pdp_file), split))
    specs = {r.pdp.bins for r in records}
    if len(specs) > 1:
        raise DatasetSchemaError(f"{path}: PDP files disagree on the bin spec")
    return records


def _write_meta(meta: dict, path: Path) -> None:
    cp = configparser.ConfigParser()
    for section in sorted(meta):
        cp[section] = {k: str(v) for k, v in sorted(meta[section].items())}
    with open(path, "w") as f:
        cp.write(f)


def _read_meta(path: Path) -> dict:
    cp = configparser.ConfigParser()
    cp.read(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def scene_meta(spec: SceneSpec, oracle_name: str, **oracle_params) -> dict:
    """Serialize scene geometry and oracle parameters into bundle metadata."""
    meta = {
        "scene": {
            "ground_sx": repr(spec.ground_size[0]),
            "ground_sy": repr(spec.ground_size[1]),
            "ground_spacing": repr(spec.ground_spacing),
            "seed": str(spec.seed),
            "n_boxes": str(len(spec.boxes)),
        },
        "oracle": {"name": oracle_name, **{k: repr(v) for k, v in oracle_params.items()}},
    }
    for i, box in enumerate(spec.boxes):
        meta[f"box{i}"] = {
            "corner": ",".join(repr(float(v)) for v in box.corner),
            "size": ",".join(repr(float(v)) for v in box.size),
            "spacing": repr(box.spacing),
            "label": box.label,
        }
    return meta


def scene_from_meta(meta: dict) -> SceneSpec:
    sc = meta["scene"]
    boxes = []
    for i in range(int(sc.get("n_boxes", "0"))):
        b = meta[f"box{i}"]
        boxes.append(
            BoxSpec(
                corner=tuple(float(v) for v in b["corner"].split(",")),
                size=tuple(float(v) for v in b["size"].split(",")),
                spacing=float(b["spacing"]),
                label=b["label"],
            )
        )
    return SceneSpec(
        ground_size=(float(sc["ground_sx"]), float(sc["ground_sy"])),
        ground_spacing=float(sc["ground_spacing"]),
        boxes=tuple(boxes),
        seed=int(sc["seed"]),
    )


def import_released_dataset(path, out_dir) -> Bundle:
    """Convert an external dataset directory into the internal bundle layout.

    Strict: unexpected structure raises DatasetSchemaError listing every
    unrecognized file (see IMPORT_ASSUMPTIONS). Conversion is lossless for
    positions, PDPs, and any RSS sidecar content; unknown files are copied
    into <out_dir>/sidecar/.
    """
    src = Path(path)
    out = Path(out_dir)
    if not src.is_dir():
        raise DatasetSchemaError(f"{src} is not a directory")

    cloud_candidates = [p for p in (src / "cloud.xyzrgbl", src / "cloud.ply") if p.exists()]
    problems = []
    if not cloud_candidates:
        problems.append("no cloud.xyzrgbl or cloud.ply")
    if not (src / "links.csv").exists():
        problems.append("no links.csv")
    if not (src / "pdp").is_dir():
        problems.append("no pdp/ directory")
    if problems:
        raise DatasetSchemaError(
            "unrecognized dataset layout: " + "; ".join(problems) + "\n" + IMPORT_ASSUMPTIONS
        )

    cloud = load_cloud(cloud_candidates[0])
    records = _read_links(src, src / "links.csv")
    meta_file = src / "meta.ini"
    meta = _read_meta(meta_file) if meta_file.exists() else {}
    bundle = Bundle(cloud, records, meta)
    write_bundle(bundle, out)

    known = {"cloud.xyzrgbl", "cloud.ply", "links.csv", "meta.ini"}
    extras = [
        p
        for p in sorted(src.iterdir())
        if p.name not in known and p.name != "pdp"
    ]
    if extras:
        sidecar = out / "sidecar"
        sidecar.mkdir(parents=True, exist_ok=True)
        for p in extras:
            if p.is_dir():
                shutil.copytree(p, sidecar / p.name, dirs_exist_ok=True)
            else:
                shutil.copy2(p, sidecar / p.name)
    return bundle
