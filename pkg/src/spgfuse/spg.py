"""Semantic-point-grid encoding: the 22-channel BEV tensor fed to the detector.

Channel layout (fixed):

====  =========================================
0-8   semantic class means (9 channels)
9     occupancy indicator (1 if any point bins here)
10    mean doppler
11    mean intensity
12    mean forward coordinate x
13    mean lateral coordinate z
14-20 height-histogram counts (7 bins over y)
21    point count n
====  =========================================

Semantic values are attached per point by projecting into the camera image
and reading the segmentation class of the nearest pixel; cells average the
per-point vectors of every point they contain.  Grid rows run along
forward x and columns along lateral z.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ParseError, ValidationError
from .geometry import CalibrationSet, Point3, project_to_pixel, transform_point
from .radar_io import RadarPointCloud, _parse_pgm_header

NUM_CHANNELS = 22
NUM_SEMANTIC = 9
NUM_HEIGHT_BINS = 7

CH_SEMANTIC = slice(0, 9)
CH_OCCUPANCY = 9
CH_DOPPLER = 10
CH_INTENSITY = 11
CH_MEAN_X = 12
CH_MEAN_Z = 13
CH_HEIGHT = slice(14, 21)
CH_NUM_POINTS = 21

SPG_MAGIC = b"SPG1"

# Semantic channel grouping applied to a 19-class street-scene palette.
SEMANTIC_CHANNEL_NAMES = (
    "road", "sidewalk", "building", "pole", "vegetation",
    "sky", "person", "car", "truck_bus",
)
_DEFAULT_GROUPS = {
    0: 0,            # road
    1: 1,            # sidewalk
    2: 2, 3: 2, 4: 2,   # building, wall, fence
    5: 3, 6: 3, 7: 3,   # pole, traffic light, traffic sign
    8: 4, 9: 4,         # vegetation, terrain
    10: 5,           # sky
    11: 6, 12: 6,       # person, rider
    13: 7,           # car
    14: 8, 15: 8,       # truck, bus
    16: None, 17: None, 18: None,  # train, motorcycle, bicycle -> ignore
}


def default_palette() -> dict[int, int | None]:
    return dict(_DEFAULT_GROUPS)


@dataclass(frozen=True)
class GridSpec:
    """BEV discretization: ranges, cell counts and height-bin edges."""

    x_range: tuple[float, float] = (0.0, 80.0)
    z_range: tuple[float, float] = (-40.0, 40.0)
    cells_x: int = 128
    cells_z: int = 128
    height_edges: tuple[float, ...] = (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5)

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.z_range[1] <= self.z_range[0]:
            raise ConfigError("degenerate grid range")
        if self.cells_x < 1 or self.cells_z < 1:
            raise ConfigError("cell counts must be positive")
        if len(self.height_edges) != NUM_HEIGHT_BINS + 1:
            raise ConfigError(f"need exactly {NUM_HEIGHT_BINS + 1} height edges "
                              f"({NUM_HEIGHT_BINS} bins), got {len(self.height_edges)}")
        if any(b <= a for a, b in zip(self.height_edges, self.height_edges[1:])):
            raise ConfigError("height edges must be strictly increasing")

    @property
    def cell_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.cells_x

    @property
    def cell_z(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.cells_z

    def cell_center(self, u: int, v: int) -> tuple[float, float]:
        return (self.x_range[0] + (u + 0.5) * self.cell_x,
                self.z_range[0] + (v + 0.5) * self.cell_z)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "z_range": list(self.z_range),
                "cells_x": self.cells_x, "cells_z": self.cells_z,
                "height_edges": list(self.height_edges)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(x_range=tuple(d["x_range"]), z_range=tuple(d["z_range"]),
                   cells_x=int(d["cells_x"]), cells_z=int(d["cells_z"]),
                   height_edges=tuple(d["height_edges"]))


def bin_point(p: Point3, g: GridSpec) -> tuple[int, int] | None:
    """Map a point to its (u, v) cell, or None when outside the grid.

    Points exactly on the upper range edge belong to the last cell.
    """
    if not (g.x_range[0] <= p.x <= g.x_range[1] and g.z_range[0] <= p.z <= g.z_range[1]):
        return None
    u = int((p.x - g.x_range[0]) / g.cell_x)
    v = int((p.z - g.z_range[0]) / g.cell_z)
    return (min(u, g.cells_x - 1), min(v, g.cells_z - 1))


@dataclass
class SemanticMask:
    """Per-pixel class ids plus the palette mapping id -> semantic channel.

    A palette value of ``None`` marks an ignored class.  ``soft_scores``
    optionally carries (9, H, W) per-channel probabilities; when present it
    is used instead of the one-hot lookup.
    """

    class_ids: np.ndarray
    palette: dict[int, int | None]
    soft_scores: np.ndarray | None = None

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids)
        if self.class_ids.ndim != 2:
            raise ValidationError("mask must be 2D")
        present = np.unique(self.class_ids)
        missing = [int(c) for c in present if int(c) not in self.palette]
        if missing:
            raise ValidationError(f"mask ids missing from palette: {missing}")
        bad = [c for c, ch in self.palette.items()
               if ch is not None and not (0 <= ch < NUM_SEMANTIC)]
        if bad:
            raise ValidationError(f"palette channels out of range for ids: {bad}")
        if self.soft_scores is not None:
            s = np.asarray(self.soft_scores, dtype=np.float64)
            if s.shape != (NUM_SEMANTIC,) + self.class_ids.shape:
                raise ValidationError("soft_scores shape mismatch")
            self.soft_scores = s

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]


def parse_semantic_mask(pgm_bytes: bytes, palette_json: bytes | str) -> SemanticMask:
    """Parse an 8-bit P5 class-id image plus its palette JSON."""
    width, height, offset = _parse_pgm_header(pgm_bytes, expect_maxval=255)
    payload = pgm_bytes[offset:]
    if len(payload) != width * height:
        raise FormatError(f"mask payload is {len(payload)} bytes, expected {width * height}")
    ids = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    try:
        raw = json.loads(palette_json)
        palette = {int(k): (None if v == "ignore" else int(v)) for k, v in raw.items()}
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise ParseError(f"palette JSON: {e}") from e
    return SemanticMask(ids, palette)


def write_semantic_mask(mask: SemanticMask) -> tuple[bytes, str]:
    h, w = mask.class_ids.shape
    pgm = b"P5\n%d %d\n255\n" % (w, h) + mask.class_ids.astype(np.uint8).tobytes()
    palette = json.dumps({str(k): ("ignore" if v is None else v)
                          for k, v in sorted(mask.palette.items())})
    return pgm, palette


@dataclass(frozen=True)
class NormConfig:
    """Per-channel scaling applied after feature accumulation.

    Means of x and z are mapped into [0, 1] using the grid extent defaults,
    doppler and intensity are divided by nominal maxima, and the count
    channels (height bins and n) pass through log1p.  Semantic and
    occupancy channels are never scaled.
    """

    x_offset: float = 0.0
    x_scale: float = 80.0
    z_offset: float = 40.0
    z_scale: float = 80.0
    doppler_scale: float = 30.0
    intensity_scale: float = 100.0
    log1p_counts: bool = True

    @classmethod
    def identity(cls) -> "NormConfig":
        return cls(x_offset=0.0, x_scale=1.0, z_offset=0.0, z_scale=1.0,
                   doppler_scale=1.0, intensity_scale=1.0, log1p_counts=False)

    def to_dict(self) -> dict:
        return {"x_offset": self.x_offset, "x_scale": self.x_scale,
                "z_offset": self.z_offset, "z_scale": self.z_scale,
                "doppler_scale": self.doppler_scale,
                "intensity_scale": self.intensity_scale,
                "log1p_counts": self.log1p_counts}

    @classmethod
    def from_dict(cls, d: dict) -> "NormConfig":
        return cls(**d)

    def apply(self, channels: np.ndarray) -> None:
        """Scale channels in place (float32 array, full 22-channel layout)."""
        channels[CH_DOPPLER] /= np.float32(self.doppler_scale)
        channels[CH_INTENSITY] /= np.float32(self.intensity_scale)
        channels[CH_MEAN_X] = (channels[CH_MEAN_X] + np.float32(self.x_offset)) / np.float32(self.x_scale)
        channels[CH_MEAN_Z] = (channels[CH_MEAN_Z] + np.float32(self.z_offset)) / np.float32(self.z_scale)
        if self.log1p_counts:
            channels[CH_HEIGHT] = np.log1p(channels[CH_HEIGHT])
            channels[CH_NUM_POINTS] = np.log1p(channels[CH_NUM_POINTS])


@dataclass
class SpgTensor:
    """The C x H x W grid (C = 22) plus the spec of the grid it lives on."""

    channels: np.ndarray
    grid_spec: GridSpec

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        expected = (NUM_CHANNELS, self.grid_spec.cells_x, self.grid_spec.cells_z)
        if self.channels.shape != expected:
            raise ValidationError(
                f"channel array shape {self.channels.shape}, expected {expected}")

    def to_bytes(self) -> bytes:
        c, h, w = self.channels.shape
        header = SPG_MAGIC + struct.pack("<III", c, h, w)
        return header + self.channels.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, grid_spec: GridSpec) -> "SpgTensor":
        if data[:4] != SPG_MAGIC:
            raise FormatError("bad SPG magic")
        c, h, w = struct.unpack("<III", data[4:16])
        if c != NUM_CHANNELS:
            raise FormatError(f"SPG channel count {c}, expected {NUM_CHANNELS}")
        expected = 16 + c * h * w * 4
        if len(data) != expected:
            raise FormatError(f"SPG payload is {len(data)} bytes, expected {expected}")
        arr = np.frombuffer(data[16:], dtype="<f4").reshape(c, h, w).copy()
        return cls(arr, grid_spec)


def _bin_indices(positions: np.ndarray, g: GridSpec):
    """Vectorized bin_point: returns (in-range mask, u, v) for an (N,3) array."""
    x, z = positions[:, 0], positions[:, 2]
    ok = ((x >= g.x_range[0]) & (x <= g.x_range[1])
          & (z >= g.z_range[0]) & (z <= g.z_range[1]))
    u = np.minimum(((x - g.x_range[0]) / g.cell_x).astype(np.int64), g.cells_x - 1)
    v = np.minimum(((z - g.z_range[0]) / g.cell_z).astype(np.int64), g.cells_z - 1)
    return ok, u, v


def encode_point_features(cloud: RadarPointCloud, g: GridSpec) -> np.ndarray:
    """Channels 9..21: occupancy, per-cell means, height histogram and count.

    Accumulation follows point order (float64 sums, cast to float32 at the
    end) so the result is reproducible bit for bit.
    """
    out = np.zeros((NUM_CHANNELS - NUM_SEMANTIC, g.cells_x, g.cells_z), dtype=np.float32)
    if len(cloud) == 0:
        return out
    pos, dop, inten = cloud.as_arrays()
    ok, u, v = _bin_indices(pos, g)
    if not np.any(ok):
        return out
    u, v = u[ok], v[ok]
    pos, dop, inten = pos[ok], dop[ok], inten[ok]

    counts = np.zeros((g.cells_x, g.cells_z), dtype=np.int64)
    np.add.at(counts, (u, v), 1)
    occupied = counts > 0

    sums = np.zeros((4, g.cells_x, g.cells_z), dtype=np.float64)
    np.add.at(sums[0], (u, v), dop)
    np.add.at(sums[1], (u, v), inten)
    np.add.at(sums[2], (u, v), pos[:, 0])
    np.add.at(sums[3], (u, v), pos[:, 2])

    edges = np.asarray(g.height_edges)
    hbin = np.clip(np.searchsorted(edges, pos[:, 1], side="right") - 1,
                   0, NUM_HEIGHT_BINS - 1)
    hist = np.zeros((NUM_HEIGHT_BINS, g.cells_x, g.cells_z), dtype=np.int64)
    np.add.at(hist, (hbin, u, v), 1)

    denom = np.where(occupied, counts, 1).astype(np.float64)
    out[0] = occupied
    out[1:5] = (sums / denom).astype(np.float32)
    out[5:12] = hist
    out[12] = counts
    return out


def associate_semantics(cloud: RadarPointCloud, mask: SemanticMask,
                        calib: CalibrationSet) -> np.ndarray:
    """Per-point semantic vectors (N, 9) from nearest-pixel mask lookup.

    Points behind the camera, outside the frame, or landing on an ignored
    class get the zero vector.
    """
    k = calib.intrinsics
    if (mask.height, mask.width) != (k.height, k.width):
        raise ConfigError(
            f"mask is {mask.width}x{mask.height} but calibration expects "
            f"{k.width}x{k.height}")
    out = np.zeros((len(cloud), NUM_SEMANTIC), dtype=np.float32)
    for i, p in enumerate(cloud):
        px = project_to_pixel(transform_point(p.position, calib.radar_to_camera), k)
        if px is None:
            continue
        if mask.soft_scores is not None:
            out[i] = mask.soft_scores[:, px.v, px.u]
            continue
        channel = mask.palette[int(mask.class_ids[px.v, px.u])]
        if channel is not None:
            out[i, channel] = 1.0
    return out


def assemble_spg(cloud: RadarPointCloud,
                 mask: SemanticMask | None,
                 calib: CalibrationSet | None,
                 g: GridSpec,
                 norm: NormConfig | None = None) -> SpgTensor:
    """Build the full 22-channel grid for one frame.

    Without a mask the semantic channels stay zero (radar-only encoding).
    ``norm`` defaults to the standard scaling; pass ``NormConfig.identity()``
    for raw values.
    """
    if norm is None:
        norm = NormConfig()
    if mask is not None and calib is None:
        raise ConfigError("a calibration set is required to associate a mask")

    channels = np.zeros((NUM_CHANNELS, g.cells_x, g.cells_z), dtype=np.float32)
    channels[NUM_SEMANTIC:] = encode_point_features(cloud, g)

    if mask is not None and len(cloud) > 0:
        vectors = associate_semantics(cloud, mask, calib)
        pos, _, _ = cloud.as_arrays()
        ok, u, v = _bin_indices(pos, g)
        if np.any(ok):
            u, v = u[ok], v[ok]
            sums = np.zeros((NUM_SEMANTIC, g.cells_x, g.cells_z), dtype=np.float64)
            vec64 = vectors[ok].astype(np.float64)
            for c in range(NUM_SEMANTIC):
                np.add.at(sums[c], (u, v), vec64[:, c])
            counts = np.zeros((g.cells_x, g.cells_z), dtype=np.int64)
            np.add.at(counts, (u, v), 1)
            denom = np.where(counts > 0, counts, 1).astype(np.float64)
            channels[CH_SEMANTIC] = (sums / denom).astype(np.float32)

    norm.apply(channels)
    return SpgTensor(channels, g)
