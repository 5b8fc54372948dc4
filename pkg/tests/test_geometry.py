import math

import numpy as np
import pytest

from spgfuse.errors import ValidationError
from spgfuse.geometry import (
    BevBox,
    CameraIntrinsics,
    CalibrationSet,
    Point3,
    RigidTransform,
    dump_calibration,
    load_calibration,
    polygon_intersection_area,
    project_to_pixel,
    rotated_iou,
    transform_point,
)


def yaw_rotation(angle):
    """Rotation about the height (y) axis: +x turns toward +z."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def square(cx, cy, side=1.0):
    return BevBox(cx=cx, cy=cy, w=side, l=side, yaw=0.0)


def points_in_box(pts, box):
    """Membership test used by the Monte-Carlo oracle (independent of clipping)."""
    d = pts - np.array([box.cx, box.cy])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * d[:, 0] + s * d[:, 1]
    local_z = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(local_x) <= box.l / 2) & (np.abs(local_z) <= box.w / 2)


def monte_carlo_iou(a, b, n, rng):
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    ina, inb = points_in_box(pts, a), points_in_box(pts, b)
    union = np.count_nonzero(ina | inb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ina & inb) / union


def random_box(rng, span=8.0):
    return BevBox(
        cx=rng.uniform(-span, span),
        cy=rng.uniform(-span, span),
        w=rng.uniform(0.5, 4.0),
        l=rng.uniform(0.5, 6.0),
        yaw=rng.uniform(-math.pi, math.pi),
    )


class TestTransformPoint:
    def test_identity(self):
        p = Point3(1.0, 2.0, 3.0)
        q = transform_point(p, RigidTransform.identity())
        assert (q.x, q.y, q.z) == (1.0, 2.0, 3.0)
        assert q.frame == "camera"

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), np.array([0.0, 0.0, 5.0]))
        q = transform_point(Point3(1.0, 0.0, 0.0), t)
        assert (q.x, q.y, q.z) == (1.0, 0.0, 5.0)

    def test_rotation_round_trip(self):
        t = RigidTransform(yaw_rotation(math.pi / 2), np.array([0.3, -1.0, 2.0]))
        p = Point3(4.0, 1.0, -2.5)
        back = transform_point(transform_point(p, t), t.inverse())
        assert abs(back.x - p.x) < 1e-9
        assert abs(back.y - p.y) < 1e-9
        assert abs(back.z - p.z) < 1e-9
        assert back.frame == p.frame

    def test_round_trip_many_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            angle = rng.uniform(-math.pi, math.pi)
            t = RigidTransform(yaw_rotation(angle), rng.uniform(-5, 5, 3))
            p = Point3(*rng.uniform(-10, 10, 3))
            q = transform_point(transform_point(p, t), t.inverse())
            assert max(abs(q.x - p.x), abs(q.y - p.y), abs(q.z - p.z)) < 1e-9

    def test_bad_rotation_rejected(self):
        with pytest.raises(ValidationError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValidationError):
            # Orthonormal but det = -1 (reflection).
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestProjection:
    K = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)

    def test_principal_point(self):
        px = project_to_pixel(Point3(5.0, 0.0, 0.0, frame="camera"), self.K)
        assert (px.u, px.v) == (64, 64)

    def test_behind_camera(self):
        assert project_to_pixel(Point3(-1.0, 0.0, 0.0, frame="camera"), self.K) is None
        assert project_to_pixel(Point3(0.0, 0.0, 0.0, frame="camera"), self.K) is None

    def test_hand_evaluated_pinhole(self):
        # u = round(100 * 0.5 / 1 + 64) = 114
        px = project_to_pixel(Point3(1.0, 0.0, 0.5, frame="camera"), self.K)
        assert px.u == 114

    def test_out_of_frame(self):
        assert project_to_pixel(Point3(1.0, 0.0, 1.0, frame="camera"), self.K) is None

    def test_height_maps_down(self):
        above = project_to_pixel(Point3(2.0, 0.5, 0.0, frame="camera"), self.K)
        below = project_to_pixel(Point3(2.0, -0.5, 0.0, frame="camera"), self.K)
        assert above.v < 64 < below.v

    def test_intrinsics_validation(self):
        with pytest.raises(ValidationError):
            CameraIntrinsics(fx=-1.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)
        with pytest.raises(ValidationError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=1.0, width=4, height=4)


class TestPolygonIntersection:
    def test_identical_unit_squares(self):
        sq = square(0.0, 0.0).corners()
        assert polygon_intersection_area(sq, sq.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        a = square(0.0, 0.0).corners()
        b = square(5.0, 0.0).corners()
        assert polygon_intersection_area(a, b) == 0.0

    def test_half_overlap(self):
        a = square(0.0, 0.0).corners()
        b = square(0.5, 0.0).corners()
        assert polygon_intersection_area(a, b) == pytest.approx(0.5, abs=1e-12)

    def test_degenerate_input(self):
        line = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        sq = square(0.0, 0.0).corners()
        assert polygon_intersection_area(line, sq) == 0.0


class TestRotatedIou:
    def test_self_iou(self):
        b = BevBox(3.0, -2.0, 1.8, 4.2, 0.7)
        assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_axis_aligned_third(self):
        a, b = square(0.0, 0.0), square(0.5, 0.0)
        assert rotated_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            assert rotated_iou(a, b) == rotated_iou(b, a)

    def test_axis_aligned_matches_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            a.yaw = 0.0
            b.yaw = 0.0
            ix = max(0.0, min(a.cx + a.l / 2, b.cx + b.l / 2) - max(a.cx - a.l / 2, b.cx - b.l / 2))
            iz = max(0.0, min(a.cy + a.w / 2, b.cy + b.w / 2) - max(a.cy - a.w / 2, b.cy - b.w / 2))
            inter = ix * iz
            expected = inter / (a.area + b.area - inter) if inter > 0 else 0.0
            assert rotated_iou(a, b) == pytest.approx(expected, abs=1e-12)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            a = random_box(rng, span=3.0)
            b = random_box(rng, span=3.0)
            mc = monte_carlo_iou(a, b, 200_000, rng)
            assert rotated_iou(a, b) == pytest.approx(mc, abs=1.5e-2)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            base = rotated_iou(a, b)
            ang = rng.uniform(-math.pi, math.pi)
            dx, dz = rng.uniform(-20, 20, 2)
            c, s = math.cos(ang), math.sin(ang)

            def moved(bx):
                nx = c * bx.cx - s * bx.cy + dx
                nz = s * bx.cx + c * bx.cy + dz
                return BevBox(nx, nz, bx.w, bx.l, bx.yaw + ang)

            assert rotated_iou(moved(a), moved(b)) == pytest.approx(base, abs=1e-9)

    def test_range_bounds(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            v = rotated_iou(random_box(rng), random_box(rng))
            assert 0.0 <= v <= 1.0


class TestBevBox:
    def test_yaw_normalized(self):
        b = BevBox(0.0, 0.0, 1.0, 1.0, 3 * math.pi / 2)
        assert b.yaw == pytest.approx(-math.pi / 2)

    def test_invalid_dims(self):
        with pytest.raises(ValidationError):
            BevBox(0.0, 0.0, -1.0, 1.0, 0.0)

    def test_corner_orientation_ccw(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            corners = random_box(rng).corners()
            x, z = corners[:, 0], corners[:, 1]
            area = 0.5 * (np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))
            assert area > 0


class TestCalibrationJson:
    def test_round_trip(self):
        calib = CalibrationSet(
            intrinsics=CameraIntrinsics(256.0, 256.0, 256.0, 128.0, 512, 256),
            radar_to_camera=RigidTransform(yaw_rotation(0.1), np.array([0.0, -1.2, 0.05])),
            sensor_height=0.8,
        )
        text = dump_calibration(calib)
        back = load_calibration(text)
        assert back.intrinsics == calib.intrinsics
        assert back.sensor_height == calib.sensor_height
        np.testing.assert_allclose(back.radar_to_camera.as_matrix(),
                                   calib.radar_to_camera.as_matrix(), atol=1e-15)

    def test_malformed(self):
        from spgfuse.errors import ParseError

        with pytest.raises(ParseError):
            load_calibration("{not json")
        with pytest.raises(ParseError):
            load_calibration("{}")
