"""Coordinate frames, rigid transforms, camera projection and rotated BEV boxes.

Frame convention used throughout the toolkit: x is forward depth, y is
height above ground, z is lateral (positive to the right).  All BEV
geometry lives in the (x, z) plane; yaw is measured from +x toward +z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

# Polygons with shoelace area below this are treated as empty.
AREA_EPS = 1e-12


@dataclass(frozen=True)
class Point3:
    """A 3D point tagged with the frame it lives in ("radar" or "camera")."""

    x: float
    y: float
    z: float
    frame: str = "radar"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValidationError(f"non-finite point ({self.x}, {self.y}, {self.z})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class PixelCoord:
    u: int
    v: int


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping points between the radar and camera frames."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("non-finite transform")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValidationError("rotation columns not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValidationError("rotation determinant must be +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


@dataclass(frozen=True)
class CalibrationSet:
    """Camera intrinsics, radar-to-camera extrinsic and radar mounting height.

    ``sensor_height`` is the height coordinate assigned to points recovered
    from height-less 2D intensity maps.
    """

    intrinsics: CameraIntrinsics
    radar_to_camera: RigidTransform
    sensor_height: float

    def __post_init__(self):
        if not math.isfinite(self.sensor_height):
            raise ValidationError("sensor_height must be finite")


def transform_point(p: Point3, t: RigidTransform) -> Point3:
    """Apply ``rotation @ p + translation``; the frame tag flips radar<->camera.

    Spelled out in scalar arithmetic with a fixed summation order so results
    are reproducible bit for bit across BLAS backends.
    """
    r = t.rotation
    tr = t.translation
    x = r[0, 0] * p.x + r[0, 1] * p.y + r[0, 2] * p.z + tr[0]
    y = r[1, 0] * p.x + r[1, 1] * p.y + r[1, 2] * p.z + tr[1]
    z = r[2, 0] * p.x + r[2, 1] * p.y + r[2, 2] * p.z + tr[2]
    new_frame = "camera" if p.frame == "radar" else "radar"
    return Point3(float(x), float(y), float(z), frame=new_frame)


def _round_half_away(v: float) -> int:
    return int(math.floor(v + 0.5)) if v >= 0 else int(math.ceil(v - 0.5))


def project_to_pixel(p_cam: Point3, k: CameraIntrinsics) -> PixelCoord | None:
    """Pinhole projection of a camera-frame point to its nearest pixel.

    The nearest pixel is taken by rounding half away from zero.  Returns
    ``None`` for points at or behind the camera plane and for points whose
    rounded pixel falls outside the image.
    """
    depth = p_cam.x
    if depth <= 0:
        return None
    u = _round_half_away(k.fx * p_cam.z / depth + k.cx)
    v = _round_half_away(k.fy * (-p_cam.y) / depth + k.cy)
    if 0 <= u < k.width and 0 <= v < k.height:
        return PixelCoord(u, v)
    return None


def _normalize_yaw(yaw: float) -> float:
    """Wrap to (-pi, pi]."""
    y = math.fmod(yaw, 2.0 * math.pi)
    if y > math.pi:
        y -= 2.0 * math.pi
    elif y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass
class BevBox:
    """A yaw-rotated rectangle in the BEV (x, z) plane.

    ``cx`` is the forward coordinate, ``cy`` the lateral one; ``l`` extends
    along the heading given by ``yaw`` and ``w`` across it.  ``score`` is
    set on predictions only.
    """

    cx: float
    cy: float
    w: float
    l: float
    yaw: float
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.l, self.yaw)):
            raise ValidationError("non-finite box parameter")
        if self.w <= 0 or self.l <= 0:
            raise ValidationError(f"box dimensions must be positive, got w={self.w} l={self.l}")
        self.yaw = _normalize_yaw(self.yaw)

    @property
    def area(self) -> float:
        return self.w * self.l

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.l)

    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise in the (x, z) plane."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def _shoelace_area(poly: np.ndarray) -> float:
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))


def polygon_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection area of two convex counter-clockwise polygons.

    Sutherland-Hodgman clipping of ``a`` against each edge of ``b``.
    Degenerate (near zero-area) inputs yield 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if abs(_shoelace_area(a)) < AREA_EPS or abs(_shoelace_area(b)) < AREA_EPS:
        return 0.0

    output = [tuple(p) for p in a]
    for i in range(len(b)):
        if not output:
            return 0.0
        cp1 = tuple(b[i - 1])
        cp2 = tuple(b[i])
        ex, ez = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ez * (p[0] - cp1[0]) >= 0.0

        def intersect(s, e):
            dpx, dpz = e[0] - s[0], e[1] - s[1]
            denom = ex * dpz - ez * dpx
            num = ex * (cp1[1] - s[1]) - ez * (cp1[0] - s[0])
            t = num / denom
            return (s[0] + t * dpx, s[1] + t * dpz)

        clipped = []
        s = output[-1]
        s_in = inside(s)
        for e in output:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    clipped.append(intersect(s, e))
                clipped.append(e)
            elif s_in:
                clipped.append(intersect(s, e))
            s, s_in = e, e_in
        output = clipped

    if len(output) < 3:
        return 0.0
    area = _shoelace_area(np.array(output))
    return area if area > AREA_EPS else 0.0


def rotated_iou(a: BevBox, b: BevBox) -> float:
    """Intersection-over-union of two rotated BEV boxes, in [0, 1].

    The pair is put in a canonical order before clipping so the result is
    exactly symmetric in its arguments.
    """
    ka = (a.cx, a.cy, a.w, a.l, a.yaw)
    kb = (b.cx, b.cy, b.w, b.l, b.yaw)
    if kb < ka:
        a, b = b, a
    # Quick reject: boxes farther apart than their half-diagonals cannot meet.
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    inter = polygon_intersection_area(a.corners(), b.corners())
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def load_calibration(data: str | bytes) -> CalibrationSet:
    """Parse the calibration JSON document.

    Expected shape::

        {"K": [[fx,0,cx],[0,fy,cy],[0,0,1]],
         "T_radar_to_cam": [16 row-major floats],
         "sensor_height": float,
         "image_size": [width, height]}
    """
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"calibration JSON: {e}") from e
    try:
        k = np.asarray(doc["K"], dtype=np.float64)
        t = np.asarray(doc["T_radar_to_cam"], dtype=np.float64).reshape(4, 4)
        w, h = doc["image_size"]
        sensor_height = float(doc["sensor_height"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"calibration JSON missing or malformed field: {e}") from e
    intr = CameraIntrinsics(fx=float(k[0, 0]), fy=float(k[1, 1]),
                            cx=float(k[0, 2]), cy=float(k[1, 2]),
                            width=int(w), height=int(h))
    return CalibrationSet(intrinsics=intr,
                          radar_to_camera=RigidTransform.from_matrix(t),
                          sensor_height=sensor_height)


def dump_calibration(calib: CalibrationSet) -> str:
    k = calib.intrinsics
    doc = {
        "K": [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]],
        "T_radar_to_cam": [float(v) for v in calib.radar_to_camera.as_matrix().ravel()],
        "sensor_height": calib.sensor_height,
        "image_size": [k.width, k.height],
    }
    return json.dumps(doc, indent=2)
