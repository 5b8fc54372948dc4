"""Deterministic parametric weather filters for camera images.

Each filter is a pure function of (pixels, params): the same seed always
produces the same bytes.  Fog blends toward white through a low-frequency
value-noise opacity field, rain draws slanted semi-transparent streaks and
snow stamps motion-blurred bright specks.  There is no depth dependence;
the filters are stress inputs, not physical models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

WEATHER_KINDS = ("fog", "rain", "snow")


@dataclass(frozen=True)
class WeatherParams:
    kind: str = "fog"
    fog_density: float = 0.6
    drop_size: tuple[float, float] = (0.10, 0.20)
    drops_per_kpx: float = 2.0
    flake_size: tuple[float, float] = (0.7, 0.95)
    speed: tuple[float, float] = (0.001, 0.03)
    flakes_per_kpx: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in WEATHER_KINDS:
            raise ConfigError(f"unknown weather kind {self.kind!r}")
        if not (0.0 <= self.fog_density <= 1.0):
            raise ConfigError("fog density must be in [0, 1]")
        for name, rng_ in (("drop_size", self.drop_size),
                           ("flake_size", self.flake_size),
                           ("speed", self.speed)):
            if len(rng_) != 2 or rng_[0] > rng_[1] or rng_[0] < 0:
                raise ConfigError(f"{name} must be an ordered non-negative range")
        if self.drops_per_kpx < 0 or self.flakes_per_kpx < 0:
            raise ConfigError("densities must be non-negative")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError(f"expected H x W x 3 uint8 image, got {img.shape} {img.dtype}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValidationError("zero-sized image")
    return img


def _value_noise(rng, h, w, lattice=7, octaves=2):
    """Low-frequency noise in [0, 1] from bilinearly upsampled random lattices."""
    out = np.zeros((h, w))
    amp_total = 0.0
    for octave in range(octaves):
        cells = lattice * (2 ** octave)
        lat = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        a = lat[np.ix_(y0, x0)]
        b = lat[np.ix_(y0, x0 + 1)]
        c = lat[np.ix_(y0 + 1, x0)]
        d = lat[np.ix_(y0 + 1, x0 + 1)]
        amp = 0.5 ** octave
        out += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy)
        amp_total += amp
    return out / amp_total


def _blend_to_white(img: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """out = img + opacity * (255 - img); monotone non-decreasing in opacity."""
    out = img.astype(np.float64) + opacity[..., None] * (255.0 - img.astype(np.float64))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _apply_fog(img, p, rng):
    if p.fog_density == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    fieldn = _value_noise(rng, h, w)
    opacity = np.clip(p.fog_density * (0.35 + 0.65 * fieldn), 0.0, 1.0)
    return _blend_to_white(img, opacity)


def _line_pixels(x0, y0, x1, y1, h, w):
    """Integer pixels along a segment (dense sampling, deduplicated in order)."""
    steps = max(abs(x1 - x0), abs(y1 - y0))
    n = max(int(math.ceil(steps)) * 2, 1)
    ts = np.linspace(0.0, 1.0, n + 1)
    xs = np.rint(x0 + (x1 - x0) * ts).astype(int)
    ys = np.rint(y0 + (y1 - y0) * ts).astype(int)
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    return ys[keep], xs[keep]


def _apply_rain(img, p, rng):
    h, w = img.shape[:2]
    n_drops = int(round(p.drops_per_kpx * h * w / 1000.0))
    if n_drops == 0:
        return img.copy()
    base_angle = rng.uniform(-0.25, 0.25)
    out = img.astype(np.float64)
    color = np.array([205.0, 205.0, 215.0])
    for _ in range(n_drops):
        x0 = rng.uniform(0, w)
        y0 = rng.uniform(0, h)
        size = rng.uniform(*p.drop_size)
        length = size * min(h, w)
        angle = base_angle + rng.uniform(-0.05, 0.05)
        x1 = x0 + length * math.sin(angle)
        y1 = y0 + length * math.cos(angle)
        alpha = rng.uniform(0.25, 0.5)
        ys, xs = _line_pixels(x0, y0, x1, y1, h, w)
        out[ys, xs] = (1 - alpha) * out[ys, xs] + alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _apply_snow(img, p, rng):
    h, w = img.shape[:2]
    n_flakes = int(round(p.flakes_per_kpx * h * w / 1000.0))
    if n_flakes == 0:
        return img.copy()
    direction = rng.uniform(-0.6, 0.6)
    opacity = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_flakes):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        size = rng.uniform(*p.flake_size)
        radius = 0.6 + 2.4 * size
        speed = rng.uniform(*p.speed)
        blur = max(1, int(round(speed * min(h, w))))
        alpha = rng.uniform(0.55, 0.9)
        for step in range(blur):
            px = cx + step * math.sin(direction)
            py = cy + step * math.cos(direction)
            a = alpha * (1.0 - 0.6 * step / blur)
            x_lo, x_hi = int(px - radius - 1), int(px + radius + 2)
            y_lo, y_hi = int(py - radius - 1), int(py + radius + 2)
            if x_hi < 0 or y_hi < 0 or x_lo >= w or y_lo >= h:
                continue
            x_lo, y_lo = max(x_lo, 0), max(y_lo, 0)
            x_hi, y_hi = min(x_hi, w), min(y_hi, h)
            patch_d2 = ((xx[y_lo:y_hi, x_lo:x_hi] - px) ** 2
                        + (yy[y_lo:y_hi, x_lo:x_hi] - py) ** 2)
            stamp = a * np.clip(1.0 - patch_d2 / (radius * radius), 0.0, 1.0)
            np.maximum(opacity[y_lo:y_hi, x_lo:x_hi], stamp,
                       out=opacity[y_lo:y_hi, x_lo:x_hi])
    return _blend_to_white(img, np.clip(opacity, 0.0, 1.0))


def apply_weather(img: np.ndarray, p: WeatherParams) -> np.ndarray:
    """Degrade an RGB image with the configured weather effect."""
    img = _check_image(img)
    rng = np.random.default_rng(p.seed)
    if p.kind == "fog":
        return _apply_fog(img, p, rng)
    if p.kind == "rain":
        return _apply_rain(img, p, rng)
    return _apply_snow(img, p, rng)


# --- binary PPM (P6) container ---

def parse_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise FormatError("not a P6 PPM (bad magic)")
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
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric PPM header fields {tokens}") from None
    if maxval != 255:
        raise FormatError(f"PPM maxval {maxval}, expected 255")
    payload = data[pos:]
    if len(payload) != width * height * 3:
        raise FormatError(f"PPM payload is {len(payload)} bytes, expected {width * height * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(img: np.ndarray) -> bytes:
    img = _check_image(img)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()
