"""Radar data ingestion: point-cloud CSV, 16-bit intensity-map PGM and CA-CFAR.

Two radar data shapes are supported: sparse point clouds carrying doppler
and intensity per point, and dense 2D BEV intensity maps without height
information.  ``cfar_detect`` converts the latter into the former; recovered
points take the sensor mounting height as their height coordinate and a
doppler of zero (intensity maps carry no velocity).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ParseError, ValidationError
from .geometry import BevBox, CalibrationSet, Point3

POINT_CLOUD_HEADER = ["x", "y", "z", "doppler", "intensity"]
DEFAULT_LABEL_RANGE = 80.0


@dataclass(frozen=True)
class RadarPoint:
    position: Point3
    doppler: float
    intensity: float

    def __post_init__(self):
        if not (math.isfinite(self.doppler) and math.isfinite(self.intensity)):
            raise ValidationError("non-finite radar point fields")
        if self.intensity < 0:
            raise ValidationError(f"negative intensity {self.intensity}")


@dataclass
class RadarPointCloud:
    """Ordered collection of radar points; order is file/accumulation order."""

    points: list[RadarPoint] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def as_arrays(self):
        """Return (positions (N,3), doppler (N,), intensity (N,)) float64 arrays."""
        n = len(self.points)
        pos = np.empty((n, 3), dtype=np.float64)
        dop = np.empty(n, dtype=np.float64)
        inten = np.empty(n, dtype=np.float64)
        for i, p in enumerate(self.points):
            pos[i] = (p.position.x, p.position.y, p.position.z)
            dop[i] = p.doppler
            inten[i] = p.intensity
        return pos, dop, inten


def parse_point_cloud(data: bytes | str) -> RadarPointCloud:
    """Parse the point-cloud CSV (header ``x,y,z,doppler,intensity``)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("point cloud CSV is empty") from None
    if [h.strip() for h in header] != POINT_CLOUD_HEADER:
        raise ParseError(f"bad point cloud header {header!r}, expected {POINT_CLOUD_HEADER}")

    points = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise ParseError(f"line {lineno}: expected 5 fields, got {len(row)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"line {lineno}: non-finite value in {row}")
        if vals[4] < 0:
            raise ParseError(f"line {lineno}: negative intensity {vals[4]}")
        x, y, z, d, r = vals
        points.append(RadarPoint(Point3(x, y, z), d, r))
    return RadarPointCloud(points)


def write_point_cloud(cloud: RadarPointCloud) -> bytes:
    out = io.StringIO()
    out.write(",".join(POINT_CLOUD_HEADER) + "\n")
    for p in cloud:
        vals = (p.position.x, p.position.y, p.position.z, p.doppler, p.intensity)
        out.write(",".join(repr(float(v)) for v in vals) + "\n")
    return out.getvalue().encode("utf-8")


@dataclass
class IntensityMap:
    """Dense BEV intensity grid.

    ``values[i, j]`` covers the BEV cell whose lower corner is at
    ``(origin[0] + i*m, origin[1] + j*m)`` with ``m = meters_per_cell``;
    rows advance along forward x, columns along lateral z.
    """

    values: np.ndarray
    meters_per_cell: float
    origin: tuple[float, float] = (0.0, 0.0)
    forward_crop: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("intensity map must be 2D")
        if self.meters_per_cell <= 0:
            raise ValidationError("meters_per_cell must be positive")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValidationError("intensity values must be finite and non-negative")


@dataclass(frozen=True)
class CfarConfig:
    """Cell-averaging CFAR window: per-side training and guard cell counts."""

    train_cells: int = 8
    guard_cells: int = 2
    pfa: float = 1e-3

    def __post_init__(self):
        if self.train_cells < 1:
            raise ConfigError("train_cells must be >= 1")
        if self.guard_cells < 0:
            raise ConfigError("guard_cells must be >= 0")
        if not (0.0 < self.pfa < 1.0):
            raise ConfigError("pfa must be in (0, 1)")

    @property
    def num_train(self) -> int:
        """Training cells per window: full square minus the guard square."""
        outer = 2 * (self.train_cells + self.guard_cells) + 1
        inner = 2 * self.guard_cells + 1
        return outer * outer - inner * inner

    @property
    def alpha(self) -> float:
        """Threshold multiplier holding the design false-alarm probability."""
        n = self.num_train
        return n * (self.pfa ** (-1.0 / n) - 1.0)


def _box_sums(values: np.ndarray, half: int) -> np.ndarray:
    """Sum over the (2*half+1)^2 square around each valid cell.

    Output shape is (H - 2*half, W - 2*half): one entry per cell whose
    window fits inside the map.
    """
    h, w = values.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(values, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    k = 2 * half + 1
    return (ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k])


def cfar_detect(imap: IntensityMap, cfg: CfarConfig, calib: CalibrationSet) -> RadarPointCloud:
    """2D cell-averaging CFAR over a BEV intensity map.

    The noise level at each cell under test is the mean of the training
    band (a square ring outside the guard square); a cell fires when its
    value exceeds ``alpha * noise``.  Border cells whose window would leave
    the map are skipped, as are rearward cells when ``forward_crop`` is
    set.  Detections are emitted in row-major cell order at the cell's BEV
    center, with y fixed to the sensor height and doppler 0.
    """
    values = imap.values
    h, w = values.shape
    g, t = cfg.guard_cells, cfg.train_cells
    reach = g + t
    if 2 * reach + 1 > min(h, w):
        raise ConfigError(
            f"CFAR window {2 * reach + 1} exceeds map dimensions {h}x{w}")

    outer = _box_sums(values, reach)
    inner = _box_sums(values, g)[t:-t if t else None, t:-t if t else None]
    noise = (outer - inner) / cfg.num_train

    core = values[reach:h - reach, reach:w - reach]
    mask = core > cfg.alpha * noise

    if imap.forward_crop:
        m = imap.meters_per_cell
        rows = np.arange(reach, h - reach)
        x_centers = imap.origin[0] + (rows + 0.5) * m
        mask &= (x_centers >= 0.0)[:, None]

    ridx, cidx = np.nonzero(mask)  # row-major order
    m = imap.meters_per_cell
    y = calib.sensor_height
    points = []
    for i, j in zip(ridx + reach, cidx + reach):
        x = imap.origin[0] + (i + 0.5) * m
        z = imap.origin[1] + (j + 0.5) * m
        points.append(RadarPoint(Point3(float(x), y, float(z)),
                                 doppler=0.0, intensity=float(values[i, j])))
    return RadarPointCloud(points)


# --- 16-bit PGM (P5) container for intensity maps ---

def _parse_pgm_header(data: bytes, expect_maxval: int):
    """Parse a P5 header: magic, width, height, maxval; returns payload offset."""
    if data[:2] != b"P5":
        raise FormatError("not a P5 PGM (bad magic)")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(v) for v in tokens)
    except ValueError:
        raise FormatError(f"non-numeric PGM header fields {tokens}") from None
    if maxval != expect_maxval:
        raise FormatError(f"PGM maxval {maxval}, expected {expect_maxval}")
    return width, height, pos


def parse_intensity_map(pgm_bytes: bytes, meta_json: bytes | str) -> IntensityMap:
    """Parse a 16-bit big-endian P5 PGM plus its sidecar metadata JSON."""
    width, height, offset = _parse_pgm_header(pgm_bytes, expect_maxval=65535)
    payload = pgm_bytes[offset:]
    expected = width * height * 2
    if len(payload) != expected:
        raise FormatError(
            f"PGM payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=">u2").reshape(height, width).astype(np.float64)

    try:
        meta = json.loads(meta_json)
        mpc = float(meta["meters_per_cell"])
        origin = (float(meta["origin"][0]), float(meta["origin"][1]))
        forward_crop = bool(meta["forward_crop"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
        raise ParseError(f"intensity map metadata: {e}") from e
    return IntensityMap(values, mpc, origin, forward_crop)


def write_intensity_map(imap: IntensityMap) -> tuple[bytes, str]:
    """Serialize to (PGM bytes, metadata JSON). Values are rounded to u16."""
    h, w = imap.values.shape
    quantized = np.clip(np.rint(imap.values), 0, 65535).astype(">u2")
    pgm = b"P5\n%d %d\n65535\n" % (w, h) + quantized.tobytes()
    meta = json.dumps({
        "meters_per_cell": imap.meters_per_cell,
        "origin": [imap.origin[0], imap.origin[1]],
        "forward_crop": imap.forward_crop,
    })
    return pgm, meta


def parse_labels(data: bytes | str, max_range: float | None = DEFAULT_LABEL_RANGE) -> list[BevBox]:
    """Parse ground-truth boxes from JSON; optionally drop beyond ``max_range``.

    Each entry is ``{cx, cy, w, l, yaw, class}``; yaw is normalized on load.
    """
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"labels JSON: {e}") from e
    if not isinstance(doc, list):
        raise ParseError("labels JSON must be a list")
    boxes = []
    for i, entry in enumerate(doc):
        try:
            box = BevBox(cx=float(entry["cx"]), cy=float(entry["cy"]),
                         w=float(entry["w"]), l=float(entry["l"]),
                         yaw=float(entry["yaw"]), class_id=int(entry["class"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"label {i}: {e}") from e
        if max_range is not None and math.hypot(box.cx, box.cy) > max_range:
            continue
        boxes.append(box)
    return boxes


def write_labels(boxes: list[BevBox]) -> str:
    return json.dumps([
        {"cx": b.cx, "cy": b.cy, "w": b.w, "l": b.l, "yaw": b.yaw, "class": b.class_id}
        for b in boxes
    ], indent=2)
