"""Seeded synthetic scenes: radar clouds, semantic masks, calibration, labels.

Vehicles are rectangles scattered over the grid; radar points are sampled
on the faces visible from the sensor plus a sparser set when another
vehicle blocks the line of sight (ground-bounce returns), with a few
interior hits.  Clutter clusters reuse the vehicle sampling recipe on
phantom boxes so their spatial spread is deliberately car-like: radar
statistics alone cannot separate them, which is exactly what makes the
camera-semantics ablation measurable.  Masks are rendered by projecting
silhouettes through the generated calibration, painted back to front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError, ValidationError
from .geometry import (
    BevBox,
    CalibrationSet,
    CameraIntrinsics,
    Point3,
    RigidTransform,
)
from .radar_io import RadarPoint, RadarPointCloud
from .spg import GridSpec, SemanticMask, default_palette

IMG_WIDTH, IMG_HEIGHT = 256, 128
FOCAL = 128.0
CAMERA_HEIGHT = 1.2
SENSOR_HEIGHT = 0.8

ID_ROAD, ID_VEGETATION, ID_SKY, ID_CAR, ID_IGNORE = 0, 8, 10, 13, 16

# Silhouettes are dilated beyond the 3-sigma position-noise clip so every
# noisy, pixel-rounded vehicle point still lands inside its own silhouette.
SILHOUETTE_MARGIN = 0.6


@dataclass(frozen=True)
class SceneConfig:
    num_vehicles: tuple[int, int] = (2, 5)
    vehicle_size_mean: tuple[float, float] = (2.0, 4.5)
    vehicle_size_sigma: tuple[float, float] = (0.15, 0.35)
    vehicle_height: float = 1.5
    clutter_clusters: tuple[int, int] = (2, 5)
    points_per_meter: float = 2.5
    interior_points: tuple[int, int] = (3, 6)
    dropout: float = 0.05
    position_noise: float = 0.1
    speed_range: tuple[float, float] = (-15.0, 15.0)
    parked_prob: float = 0.35
    semantic_noise: float = 0.0
    mask_blob_frac: float = 0.0
    # When set, vehicle yaw = a random axis multiple of pi/2 plus a uniform
    # jitter of this half-width; None draws yaw uniformly over the circle.
    axis_yaw_jitter: float | None = None
    seed: int = 0
    max_placement_tries: int = 200

    def __post_init__(self):
        for name, v in (("dropout", self.dropout), ("semantic_noise", self.semantic_noise),
                        ("mask_blob_frac", self.mask_blob_frac), ("parked_prob", self.parked_prob)):
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1]")
        if self.position_noise < 0:
            raise ValidationError("position_noise must be >= 0")
        if self.num_vehicles[0] > self.num_vehicles[1] or self.num_vehicles[0] < 0:
            raise ValidationError("bad num_vehicles range")


@dataclass
class Scene:
    cloud: RadarPointCloud
    mask: SemanticMask
    calib: CalibrationSet
    labels: list[BevBox]
    point_owner: np.ndarray  # per-point vehicle index, -1 for clutter

    def as_tuple(self):
        return self.cloud, self.mask, self.calib, self.labels


def make_synth_calibration() -> CalibrationSet:
    return CalibrationSet(
        intrinsics=CameraIntrinsics(fx=FOCAL, fy=FOCAL, cx=IMG_WIDTH / 2,
                                    cy=IMG_HEIGHT / 2, width=IMG_WIDTH,
                                    height=IMG_HEIGHT),
        radar_to_camera=RigidTransform(np.eye(3), np.array([0.0, -CAMERA_HEIGHT, 0.0])),
        sensor_height=SENSOR_HEIGHT,
    )


def _clipped_normal(rng, sigma, size=None):
    if sigma == 0:
        return np.zeros(size) if size is not None else 0.0
    return np.clip(rng.normal(0.0, sigma, size=size), -3.0 * sigma, 3.0 * sigma)


def _box_fits(box: BevBox, grid: GridSpec) -> bool:
    c = box.corners()
    return (c[:, 0].min() >= grid.x_range[0] + 0.1
            and c[:, 0].max() <= grid.x_range[1] - 0.1
            and c[:, 1].min() >= grid.z_range[0] + 0.1
            and c[:, 1].max() <= grid.z_range[1] - 0.1)


def _well_separated(box: BevBox, others: list[BevBox]) -> bool:
    for other in others:
        if (math.hypot(box.cx - other.cx, box.cy - other.cy)
                < 0.5 * (box.diagonal + other.diagonal) + 0.5):
            return False
    return True


def _place_boxes(rng, cfg: SceneConfig, grid: GridSpec, count: int,
                 lateral_slope: float, avoid: list[BevBox]) -> list[BevBox]:
    """Rejection-sample non-overlapping boxes inside the grid and FOV cone."""
    placed: list[BevBox] = []
    x_lo = max(grid.x_range[0] + 4.0, 6.0)
    x_hi = grid.x_range[1] - 3.0
    tries = 0
    while len(placed) < count:
        if tries >= cfg.max_placement_tries * max(count, 1):
            raise GenerationError(
                f"could not place {count} boxes after {tries} attempts")
        tries += 1
        w = max(1.2, cfg.vehicle_size_mean[0] + rng.normal(0, cfg.vehicle_size_sigma[0]))
        l = max(2.2, cfg.vehicle_size_mean[1] + rng.normal(0, cfg.vehicle_size_sigma[1]))
        x = rng.uniform(x_lo, x_hi)
        z_reach = min(lateral_slope * x, grid.z_range[1] - 3.0)
        z = rng.uniform(-z_reach, z_reach)
        if cfg.axis_yaw_jitter is None:
            yaw = rng.uniform(-math.pi, math.pi)
        else:
            yaw = (0.5 * math.pi * rng.integers(-1, 3)
                   + rng.uniform(-cfg.axis_yaw_jitter, cfg.axis_yaw_jitter))
        box = BevBox(x, z, w, l, yaw)
        if _box_fits(box, grid) and _well_separated(box, placed + avoid):
            placed.append(box)
    return placed


def _is_occluded(box: BevBox, others: list[BevBox]) -> bool:
    """True when another, nearer box blocks the sight line to this center."""
    r = math.hypot(box.cx, box.cy)
    steps = max(int(r / 0.5), 2)
    ts = np.linspace(0.1, 0.92, steps)
    for other in others:
        if other is box or math.hypot(other.cx, other.cy) >= r:
            continue
        c, s = math.cos(other.yaw), math.sin(other.yaw)
        px = ts * box.cx - other.cx
        pz = ts * box.cy - other.cy
        local_x = c * px + s * pz
        local_z = -s * px + c * pz
        if np.any((np.abs(local_x) <= other.l / 2) & (np.abs(local_z) <= other.w / 2)):
            return True
    return False


def _sample_box_points(rng, cfg: SceneConfig, box: BevBox, height: float,
                       occluded: bool):
    """Points on the sensor-facing faces plus a few interior hits (pre-noise)."""
    corners = box.corners()
    pts = []
    density = cfg.points_per_meter * (0.35 if occluded else 1.0)
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        mid = 0.5 * (a + b)
        edge = b - a
        normal = np.array([edge[1], -edge[0]])
        if normal @ mid >= 0:  # back face, not visible from the origin
            continue
        count = max(1, int(round(np.linalg.norm(edge) * density)))
        for t in rng.uniform(0.05, 0.95, count):
            p = a + t * edge
            pts.append((p[0], rng.uniform(0.05, 0.95 * height), p[1]))
    n_inner = int(rng.integers(cfg.interior_points[0], cfg.interior_points[1] + 1))
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    for _ in range(n_inner):
        lx = rng.uniform(-0.3, 0.3) * box.l
        lz = rng.uniform(-0.3, 0.3) * box.w
        pts.append((box.cx + c * lx - s * lz,
                    rng.uniform(0.1, 0.9 * height),
                    box.cy + s * lx + c * lz))
    return pts


def _project_silhouette(box: BevBox, y_lo: float, y_hi: float,
                        calib: CalibrationSet, margin: float):
    """Unrounded pixel hull corners of the dilated box, or None if behind."""
    grown = BevBox(box.cx, box.cy, box.w + 2 * margin, box.l + 2 * margin, box.yaw)
    k = calib.intrinsics
    t = calib.radar_to_camera.translation
    uvs = []
    for cx, cz in grown.corners():
        for y in (y_lo, y_hi):
            x_cam, y_cam, z_cam = cx + t[0], y + t[1], cz + t[2]
            if x_cam < 0.2:
                return None
            uvs.append((k.fx * z_cam / x_cam + k.cx, k.fy * (-y_cam) / x_cam + k.cy))
    return np.array(uvs)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(iterable):
        out = []
        for p in iterable:
            while len(out) >= 2:
                a, b = out[-1] - out[-2], p - out[-2]
                if a[0] * b[1] - a[1] * b[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(ids: np.ndarray, hull_uv: np.ndarray, class_id: int):
    """Paint pixels whose center lies inside the hull (counter-clockwise)."""
    if len(hull_uv) < 3:
        return
    h, w = ids.shape
    u_lo = max(0, int(math.floor(hull_uv[:, 0].min())))
    u_hi = min(w - 1, int(math.ceil(hull_uv[:, 0].max())))
    v_lo = max(0, int(math.floor(hull_uv[:, 1].min())))
    v_hi = min(h - 1, int(math.ceil(hull_uv[:, 1].max())))
    if u_lo > u_hi or v_lo > v_hi:
        return
    uu, vv = np.meshgrid(np.arange(u_lo, u_hi + 1), np.arange(v_lo, v_hi + 1))
    inside = np.ones(uu.shape, dtype=bool)
    n = len(hull_uv)
    for i in range(n):
        ax, ay = hull_uv[i]
        bx, by = hull_uv[(i + 1) % n]
        inside &= ((bx - ax) * (vv - ay) - (by - ay) * (uu - ax)) >= 0
    ids[v_lo:v_hi + 1, u_lo:u_hi + 1][inside] = class_id


def _degrade_mask(ids: np.ndarray, rng, noise_rate: float, blob_frac: float):
    """Label flips plus blotted-out regions, standing in for segmentation on
    weather-degraded images."""
    h, w = ids.shape
    if noise_rate > 0:
        flip = rng.random((h, w)) < noise_rate
        ids[flip] = rng.choice(
            [ID_ROAD, ID_VEGETATION, ID_SKY, ID_CAR, 2, 1], size=int(flip.sum()))
    if blob_frac > 0:
        covered = np.zeros((h, w), dtype=bool)
        vv, uu = np.mgrid[0:h, 0:w]
        for _ in range(60):
            if covered.mean() >= blob_frac:
                break
            cu, cv = rng.uniform(0, w), rng.uniform(0, h)
            ru = rng.uniform(0.05, 0.2) * w
            rv = rng.uniform(0.08, 0.3) * h
            blob = ((uu - cu) / ru) ** 2 + ((vv - cv) / rv) ** 2 <= 1.0
            covered |= blob
            ids[blob] = ID_IGNORE


def degrade_mask(mask: SemanticMask, noise_rate: float, blob_frac: float,
                 seed: int) -> SemanticMask:
    """Return a degraded copy of a mask (used by the weather eval modes)."""
    ids = mask.class_ids.copy()
    _degrade_mask(ids, np.random.default_rng(seed), noise_rate, blob_frac)
    return SemanticMask(ids, dict(mask.palette))


def generate_scene(cfg: SceneConfig, grid: GridSpec | None = None) -> Scene:
    """Build one deterministic scene; identical configs give identical output."""
    grid = grid or GridSpec()
    rng = np.random.default_rng(cfg.seed)
    calib = make_synth_calibration()

    n_veh = int(rng.integers(cfg.num_vehicles[0], cfg.num_vehicles[1] + 1))
    vehicles = _place_boxes(rng, cfg, grid, n_veh, lateral_slope=0.55, avoid=[])
    n_clutter = int(rng.integers(cfg.clutter_clusters[0], cfg.clutter_clusters[1] + 1))
    clutter = _place_boxes(rng, cfg, grid, n_clutter, lateral_slope=0.75,
                           avoid=vehicles)

    speeds = [0.0 if rng.random() < cfg.parked_prob
              else float(rng.uniform(*cfg.speed_range)) for _ in vehicles]

    raw_pts: list[tuple[float, float, float]] = []
    owners: list[int] = []
    dopplers: list[float] = []
    for vi, box in enumerate(vehicles):
        occluded = _is_occluded(box, vehicles)
        pts = _sample_box_points(rng, cfg, box, cfg.vehicle_height, occluded)
        heading = np.array([math.cos(box.yaw), math.sin(box.yaw)])
        for (x, y, z) in pts:
            r = math.hypot(x, z)
            los = np.array([x / r, z / r]) if r > 1e-9 else np.array([1.0, 0.0])
            d = speeds[vi] * float(heading @ los) + float(_clipped_normal(rng, 0.15))
            raw_pts.append((x, y, z))
            owners.append(vi)
            dopplers.append(d)
    for box in clutter:
        # Clutter mimics vehicles in spread AND height so the radar channels
        # alone cannot separate them; only the camera semantics can.
        pts = _sample_box_points(rng, cfg, box, cfg.vehicle_height, occluded=False)
        for (x, y, z) in pts:
            raw_pts.append((x, y, z))
            owners.append(-1)
            dopplers.append(float(_clipped_normal(rng, 0.15)))

    n = len(raw_pts)
    pts = np.asarray(raw_pts, dtype=np.float64).reshape(n, 3)
    if n:
        pts[:, 0] += _clipped_normal(rng, cfg.position_noise, n)
        pts[:, 2] += _clipped_normal(rng, cfg.position_noise, n)
        pts[:, 1] = np.maximum(pts[:, 1] + _clipped_normal(rng, cfg.position_noise / 2, n), 0.0)
    intensities = np.clip(rng.gamma(3.0, 12.0, size=n), 1.0, 150.0)

    keep = np.ones(n, dtype=bool)
    if cfg.dropout > 0 and n:
        keep = rng.random(n) >= cfg.dropout

    points = []
    owner_kept = []
    for i in range(n):
        if not keep[i]:
            continue
        points.append(RadarPoint(Point3(float(pts[i, 0]), float(pts[i, 1]),
                                        float(pts[i, 2])),
                                 doppler=float(dopplers[i]),
                                 intensity=float(intensities[i])))
        owner_kept.append(owners[i])
    cloud = RadarPointCloud(points)

    # Mask: background, clutter silhouettes, then vehicles far to near so
    # nearer cars occlude and every vehicle point reads a car pixel.
    ids = np.full((IMG_HEIGHT, IMG_WIDTH), ID_ROAD, dtype=np.uint8)
    ids[:IMG_HEIGHT // 2, :] = ID_SKY
    margin = 3.0 * cfg.position_noise + SILHOUETTE_MARGIN
    for box in clutter:
        uvs = _project_silhouette(box, -margin, cfg.vehicle_height + margin,
                                  calib, margin)
        if uvs is not None:
            _fill_hull(ids, _convex_hull(uvs), ID_VEGETATION)
    for box in sorted(vehicles, key=lambda b: -math.hypot(b.cx, b.cy)):
        uvs = _project_silhouette(box, -margin, cfg.vehicle_height + margin,
                                  calib, margin)
        if uvs is not None:
            _fill_hull(ids, _convex_hull(uvs), ID_CAR)
    _degrade_mask(ids, rng, cfg.semantic_noise, cfg.mask_blob_frac)
    mask = SemanticMask(ids, default_palette())

    labels = [BevBox(b.cx, b.cy, b.w, b.l, b.yaw, class_id=0) for b in vehicles]
    return Scene(cloud, mask, calib, labels, np.asarray(owner_kept, dtype=np.int64))
