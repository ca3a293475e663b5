"""On-disk dataset directories: MPER volume files plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from .trainer import DatasetSplit, TrainConfig, default_synthetic_spec, split_counts
from .volume import LabelVolume, Volume, generate_synthetic, read_volume, write_volume

MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    pass


def write_dataset(
    out_dir: Path, cfg: TrainConfig, count: int
) -> dict:
    """Generate `count` synthetic cases and write them with a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_lab, n_unl, n_eval = split_counts(count, cfg.labeled_fraction, cfg.eval_fraction)
    manifest = {
        "seed": cfg.seed,
        "dims": list(cfg.dims),
        "num_classes": cfg.C,
        "labeled": [],
        "unlabeled": [],
        "eval": [],
    }
    for i in range(count):
        spec = default_synthetic_spec(cfg, seed=cfg.seed * 100_003 + i)
        vol, lab = generate_synthetic(spec)
        vol_name = f"vol_{i:03d}.mpv"
        lab_name = f"lab_{i:03d}.mpv"
        write_volume(out_dir / vol_name, vol)
        if i < n_lab:
            write_volume(out_dir / lab_name, lab)
            manifest["labeled"].append({"volume": vol_name, "labels": lab_name})
        elif i < n_lab + n_unl:
            manifest["unlabeled"].append({"volume": vol_name})
        else:
            write_volume(out_dir / lab_name, lab)
            manifest["eval"].append({"volume": vol_name, "labels": lab_name})
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _load_pair(root: Path, entry) -> tuple[Volume, LabelVolume]:
    vol = read_volume(root / entry["volume"])
    lab = read_volume(root / entry["labels"])
    if not isinstance(vol, Volume) or not isinstance(lab, LabelVolume):
        raise DatasetError(f"unexpected payload kinds for {entry}")
    return vol, lab


def load_dataset(data_dir: Path) -> tuple[DatasetSplit, dict]:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {data_dir}")
    with open(path) as f:
        manifest = json.load(f)
    labeled = [_load_pair(data_dir, e) for e in manifest["labeled"]]
    eval_cases = [_load_pair(data_dir, e) for e in manifest["eval"]]
    unlabeled = []
    for e in manifest["unlabeled"]:
        vol = read_volume(data_dir / e["volume"])
        if not isinstance(vol, Volume):
            raise DatasetError(f"unexpected payload kind for {e}")
        unlabeled.append(vol)
    split = DatasetSplit(labeled=labeled, unlabeled=unlabeled, eval_cases=eval_cases)
    return split, manifest
