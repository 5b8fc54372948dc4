"""Single pipeline executable: synth, encode, cfar, augment, train, eval, render.

Settings resolve in three layers: built-in defaults, then the optional
``--config`` file (JSON, or TOML when a TOML reader is available), then
explicit flags.  Config files hold one section per subcommand, e.g.::

    {"train": {"steps": 500}, "synth": {"frames": 32}}

Unknown section names or keys are rejected.  Every random choice flows
from one ``--seed`` (falling back to the ``SPG_FUSE_SEED`` environment
variable, then 0), so identical invocations produce identical artifacts.
Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .augment import WeatherParams, apply_weather, parse_ppm, write_ppm
from .dataset import derive_seed, load_dataset, write_dataset
from .detect import DetectionSet
from .errors import ConfigError, SpgFuseError
from .evalkit import predict_frame, run_eval
from .geometry import load_calibration
from .nnet import TrainConfig
from .radar_io import CfarConfig, cfar_detect, parse_intensity_map, write_point_cloud
from .render import render_bev
from .spg import GridSpec, SpgTensor
from .synthgen import SceneConfig, generate_scene
from .training import (
    encode_frame,
    history_csv,
    load_detector,
    save_detector,
    train_detector,
)

SEED_ENV_VAR = "SPG_FUSE_SEED"

DEFAULTS: dict[str, dict] = {
    "synth": {
        "frames": 16, "seed": None, "grid_cells": 128, "x_max": 80.0,
        "z_half": 40.0, "vehicles": (2, 5), "clutter": (2, 5),
        "dropout": 0.05, "position_noise": 0.1, "semantic_noise": 0.0,
        "mask_blobs": 0.0, "parked_prob": 0.35,
    },
    "encode": {"frame": None, "out": None, "out_dir": None,
               "radar_only": False, "jobs": 1},
    "cfar": {"train_cells": 8, "guard_cells": 2, "pfa": 1e-3},
    "augment": {
        "weather": "fog", "seed": None, "fog_density": 0.6,
        "drop_size": (0.10, 0.20), "drops_per_kpx": 2.0,
        "flake_size": (0.7, 0.95), "speed": (0.001, 0.03),
        "flakes_per_kpx": 3.0,
    },
    "train": {
        "steps": 1000, "batch_size": 2, "learning_rate": 1e-3,
        "weight_decay": 1e-5, "seed": None, "stages": 3,
        "radar_only": False, "loss_log": None,
    },
    "eval": {
        "mode": "clear", "score_thresh": 0.05, "nms_iou": 0.5,
        "iou_thresh": 0.5, "seed": None, "jobs": 1, "text": False,
    },
    "render": {
        "frame": 0, "scale": 4, "score_thresh": 0.3, "detections": None,
        "checkpoint": None, "mode": "clear", "seed": None,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spgfuse",
        description="Radar-camera fusion pipeline on semantic point grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, helptext):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON/TOML settings file")
        p.add_argument("--seed", type=int, help=f"base seed (default ${SEED_ENV_VAR} or 0)")
        return p

    p = add("synth", "generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--frames", type=int)
    p.add_argument("--grid-cells", type=int, dest="grid_cells")
    p.add_argument("--x-max", type=float, dest="x_max")
    p.add_argument("--z-half", type=float, dest="z_half")
    p.add_argument("--vehicles", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--clutter", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--position-noise", type=float, dest="position_noise")
    p.add_argument("--semantic-noise", type=float, dest="semantic_noise")
    p.add_argument("--mask-blobs", type=float, dest="mask_blobs")
    p.add_argument("--parked-prob", type=float, dest="parked_prob")

    p = add("encode", "encode dataset frames into SPG1 grid files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, help="single frame index")
    p.add_argument("--out", help="output file for --frame")
    p.add_argument("--out-dir", dest="out_dir", help="directory for all frames")
    p.add_argument("--radar-only", action=argparse.BooleanOptionalAction,
                   dest="radar_only")
    p.add_argument("--jobs", type=int)

    p = add("cfar", "convert an intensity-map PGM into a point-cloud CSV")
    p.add_argument("--map", required=True, dest="map_path", help="16-bit PGM")
    p.add_argument("--meta", required=True, help="sidecar JSON")
    p.add_argument("--calib", required=True, help="calibration JSON")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--train-cells", type=int, dest="train_cells")
    p.add_argument("--guard-cells", type=int, dest="guard_cells")
    p.add_argument("--pfa", type=float)

    p = add("augment", "apply a weather filter to a PPM image")
    p.add_argument("--input", required=True, help="input P6 PPM")
    p.add_argument("--out", required=True, help="output P6 PPM")
    p.add_argument("--weather", choices=["fog", "rain", "snow"])
    p.add_argument("--fog-density", type=float, dest="fog_density")
    p.add_argument("--drop-size", type=float, nargs=2, dest="drop_size")
    p.add_argument("--drops-per-kpx", type=float, dest="drops_per_kpx")
    p.add_argument("--flake-size", type=float, nargs=2, dest="flake_size")
    p.add_argument("--speed", type=float, nargs=2)
    p.add_argument("--flakes-per-kpx", type=float, dest="flakes_per_kpx")

    p = add("train", "train the detector on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output RSN1 checkpoint")
    p.add_argument("--loss-log", dest="loss_log", help="loss CSV (default <out>.loss.csv)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--stages", type=int)
    p.add_argument("--radar-only", action=argparse.BooleanOptionalAction,
                   dest="radar_only")

    p = add("eval", "evaluate a checkpoint; writes a JSON report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--mode", help="comma-separated conditions (clear, radar-only, "
                                  "corrupt-semantics, corrupt-radar, weather:fog|rain|snow)")
    p.add_argument("--score-thresh", type=float, dest="score_thresh")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--iou-thresh", type=float, dest="iou_thresh")
    p.add_argument("--jobs", type=int)
    p.add_argument("--text", action=argparse.BooleanOptionalAction,
                   help="also print a plain-text table")

    p = add("render", "draw a BEV figure for one frame")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output P6 PPM")
    p.add_argument("--frame", type=int)
    p.add_argument("--detections", help="detections JSON to draw")
    p.add_argument("--checkpoint", help="checkpoint to run when no JSON given")
    p.add_argument("--mode")
    p.add_argument("--score-thresh", type=float, dest="score_thresh")
    p.add_argument("--scale", type=int)
    return parser


def _load_config_file(path: str) -> dict:
    raw = Path(path).read_bytes()
    if path.endswith(".toml"):
        try:
            import tomllib as toml
        except ModuleNotFoundError:
            try:
                import tomli as toml
            except ModuleNotFoundError:
                raise ConfigError("TOML config requires Python 3.11+ or tomli") from None
        return toml.loads(raw.decode("utf-8"))
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: {e}") from e


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file section <- explicit flags."""
    known = dict(DEFAULTS[command])
    merged = dict(known)
    if args.config:
        doc = _load_config_file(args.config)
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a table/object")
        bad_sections = set(doc) - set(DEFAULTS) - {"seed"}
        if bad_sections:
            raise ConfigError(f"unknown config sections: {sorted(bad_sections)}")
        if "seed" in doc and merged.get("seed") is None:
            merged["seed"] = int(doc["seed"])
        section = doc.get(command, {})
        unknown = set(section) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys in [{command}]: {sorted(unknown)}")
        for k, v in section.items():
            merged[k] = tuple(v) if isinstance(known[k], tuple) else v
    for k in known:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = tuple(v) if isinstance(v, list) else v
    if "seed" in merged and merged["seed"] is None:
        merged["seed"] = int(os.environ.get(SEED_ENV_VAR, "0"))
    return merged


def _cmd_synth(args) -> int:
    o = _resolve("synth", args)
    cells = o["grid_cells"]
    grid = GridSpec(x_range=(0.0, o["x_max"]), z_range=(-o["z_half"], o["z_half"]),
                    cells_x=cells, cells_z=cells)
    scenes = []
    for i in range(o["frames"]):
        cfg = SceneConfig(
            num_vehicles=tuple(o["vehicles"]), clutter_clusters=tuple(o["clutter"]),
            dropout=o["dropout"], position_noise=o["position_noise"],
            semantic_noise=o["semantic_noise"], mask_blob_frac=o["mask_blobs"],
            parked_prob=o["parked_prob"], seed=derive_seed(o["seed"], i))
        scenes.append(generate_scene(cfg, grid))
    write_dataset(args.out, scenes, grid,
                  extra={"seed": o["seed"], "generator": {
                      "vehicles": list(o["vehicles"]), "clutter": list(o["clutter"]),
                      "dropout": o["dropout"], "position_noise": o["position_noise"],
                      "semantic_noise": o["semantic_noise"],
                      "mask_blobs": o["mask_blobs"], "parked_prob": o["parked_prob"]}})
    print(f"wrote {len(scenes)} frames to {args.out}")
    return 0


def _cmd_encode(args) -> int:
    o = _resolve("encode", args)
    ds = load_dataset(args.dataset)

    def encode_one(fi: int) -> bytes:
        channels = encode_frame(ds.frames[fi], ds.calib, ds.grid, ds.norm,
                                radar_only=bool(o["radar_only"]))
        return SpgTensor(channels, ds.grid).to_bytes()

    if o["frame"] is not None:
        if not o["out"]:
            raise ConfigError("--frame needs --out")
        Path(o["out"]).write_bytes(encode_one(o["frame"]))
        print(f"wrote {o['out']}")
        return 0
    if not o["out_dir"]:
        raise ConfigError("need --frame/--out or --out-dir")
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(len(ds.frames))
    if o["jobs"] > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=o["jobs"]) as pool:
            blobs = list(pool.map(encode_one, indices))
    else:
        blobs = [encode_one(i) for i in indices]
    for fi, blob in zip(indices, blobs):
        (out_dir / f"{ds.frames[fi].name or f'{fi:04d}'}.spg").write_bytes(blob)
    print(f"wrote {len(blobs)} grids to {out_dir}")
    return 0


def _cmd_cfar(args) -> int:
    o = _resolve("cfar", args)
    imap = parse_intensity_map(Path(args.map_path).read_bytes(),
                               Path(args.meta).read_text())
    calib = load_calibration(Path(args.calib).read_text())
    cfg = CfarConfig(train_cells=o["train_cells"], guard_cells=o["guard_cells"],
                     pfa=o["pfa"])
    cloud = cfar_detect(imap, cfg, calib)
    Path(args.out).write_bytes(write_point_cloud(cloud))
    print(f"{len(cloud)} detections -> {args.out}")
    return 0


def _cmd_augment(args) -> int:
    o = _resolve("augment", args)
    img = parse_ppm(Path(args.input).read_bytes())
    params = WeatherParams(
        kind=o["weather"], fog_density=o["fog_density"],
        drop_size=tuple(o["drop_size"]), drops_per_kpx=o["drops_per_kpx"],
        flake_size=tuple(o["flake_size"]), speed=tuple(o["speed"]),
        flakes_per_kpx=o["flakes_per_kpx"], seed=o["seed"])
    Path(args.out).write_bytes(write_ppm(apply_weather(img, params)))
    print(f"applied {o['weather']} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    o = _resolve("train", args)
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(learning_rate=o["learning_rate"], weight_decay=o["weight_decay"],
                      batch_size=o["batch_size"], seed=o["seed"],
                      max_steps=o["steps"], stages=o["stages"])
    result = train_detector(ds.frames, ds.calib, ds.grid, cfg, norm=ds.norm,
                            radar_only=bool(o["radar_only"]))
    Path(args.out).write_bytes(save_detector(result.weights, result.anchors))
    log_path = o["loss_log"] or (args.out + ".loss.csv")
    Path(log_path).write_text(history_csv(result.history))
    last = result.history[-1][1] if result.history else float("nan")
    print(f"trained {cfg.max_steps} steps (final loss {last:.6f}) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    o = _resolve("eval", args)
    ds = load_dataset(args.dataset)
    weights, anchors = load_detector(Path(args.checkpoint).read_bytes(), ds.grid)
    modes = [m.strip() for m in str(o["mode"]).split(",") if m.strip()]
    report = run_eval(weights, anchors, ds, mode=modes, iou_thresh=o["iou_thresh"],
                      score_thresh=o["score_thresh"], nms_iou=o["nms_iou"],
                      seed=o["seed"], jobs=o["jobs"])
    Path(args.out).write_text(report.to_json())
    if o["text"]:
        print(report.to_text())
    for mode, r in report.results.items():
        print(f"{mode}: AP@{o['iou_thresh']:.2f} = {r.ap:.4f}")
    return 0


def _cmd_render(args) -> int:
    o = _resolve("render", args)
    ds = load_dataset(args.dataset)
    frame = ds.frames[o["frame"]]
    if o["detections"]:
        dets = DetectionSet.from_json(Path(o["detections"]).read_text())
    elif o["checkpoint"]:
        weights, anchors = load_detector(Path(o["checkpoint"]).read_bytes(), ds.grid)
        dets = predict_frame(weights, anchors, ds, o["frame"], mode=o["mode"],
                             score_thresh=o["score_thresh"], seed=o["seed"])
    else:
        dets = DetectionSet([])
    img = render_bev(frame.cloud, frame.labels, list(dets), ds.grid, scale=o["scale"])
    Path(args.out).write_bytes(write_ppm(img))
    print(f"rendered frame {o['frame']} -> {args.out}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "encode": _cmd_encode,
    "cfar": _cmd_cfar,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "render": _cmd_render,
}


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return _HANDLERS[args.command](args)
    except SpgFuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
