"""On-disk dataset layout shared by the CLI, training and evaluation.

A dataset directory holds one file triple per frame plus shared files::

    0000.points.csv   0000.mask.pgm   0000.labels.json   ...
    calib.json  palette.json  manifest.json

The manifest records the grid, normalization constants, frame list and the
generator configuration actually used, so every later stage reads its
geometry from one place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError
from .geometry import BevBox, CalibrationSet, dump_calibration, load_calibration
from .radar_io import (
    RadarPointCloud,
    parse_labels,
    parse_point_cloud,
    write_labels,
    write_point_cloud,
)
from .spg import GridSpec, NormConfig, SemanticMask, parse_semantic_mask, write_semantic_mask
from .synthgen import Scene

MANIFEST_NAME = "manifest.json"


def derive_seed(base: int, index: int) -> int:
    """Stable per-item seed stream from one base seed."""
    import numpy as np

    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


@dataclass
class Frame:
    cloud: RadarPointCloud
    mask: SemanticMask | None
    labels: list[BevBox]
    name: str = ""


@dataclass
class Dataset:
    frames: list[Frame]
    calib: CalibrationSet
    grid: GridSpec
    norm: NormConfig
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def write_dataset(path: str | Path, scenes: list[Scene], grid: GridSpec,
                  norm: NormConfig | None = None, extra: dict | None = None) -> None:
    """Emit scenes as a dataset directory (shared calibration and palette)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    norm = norm or NormConfig()
    if not scenes:
        raise ValidationError("refusing to write an empty dataset")
    calib = scenes[0].calib
    (path / "calib.json").write_text(dump_calibration(calib))
    _pgm, palette_json = write_semantic_mask(scenes[0].mask)
    (path / "palette.json").write_text(palette_json)

    names = []
    for i, scene in enumerate(scenes):
        stem = f"{i:04d}"
        names.append(stem)
        (path / f"{stem}.points.csv").write_bytes(write_point_cloud(scene.cloud))
        pgm, _ = write_semantic_mask(scene.mask)
        (path / f"{stem}.mask.pgm").write_bytes(pgm)
        (path / f"{stem}.labels.json").write_text(write_labels(scene.labels))

    manifest = {
        "frames": names,
        "calib": "calib.json",
        "palette": "palette.json",
        "grid": grid.to_dict(),
        "norm": norm.to_dict(),
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path: str | Path, with_masks: bool = True) -> Dataset:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ParseError(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        grid = GridSpec.from_dict(manifest["grid"])
        norm = NormConfig.from_dict(manifest["norm"])
        frame_names = list(manifest["frames"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"manifest {manifest_path}: {e}") from e

    calib = load_calibration((path / manifest["calib"]).read_text())
    palette_json = (path / manifest["palette"]).read_text()

    frames = []
    for stem in frame_names:
        cloud = parse_point_cloud((path / f"{stem}.points.csv").read_bytes())
        mask = None
        mask_path = path / f"{stem}.mask.pgm"
        if with_masks and mask_path.is_file():
            mask = parse_semantic_mask(mask_path.read_bytes(), palette_json)
        labels = parse_labels((path / f"{stem}.labels.json").read_text())
        frames.append(Frame(cloud, mask, labels, name=stem))
    extra = {k: v for k, v in manifest.items()
             if k not in ("frames", "calib", "palette", "grid", "norm")}
    return Dataset(frames, calib, grid, norm, extra)
