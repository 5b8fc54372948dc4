"""Deterministic fog, rain and snow filters on a synthetic street image.

    python demos/03_weather_augmentation.py

Writes one PPM per condition under demo_out/.
"""

from pathlib import Path

import numpy as np

from spgfuse.augment import WeatherParams, apply_weather, write_ppm

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

# A simple street-like scene: sky gradient, road, two colored boxes as cars.
h, w = 192, 320
img = np.zeros((h, w, 3), dtype=np.uint8)
sky = np.linspace(180, 120, h // 2, dtype=np.uint8)
img[:h // 2] = np.stack([sky * 0 + 90, sky * 0 + 130, sky], axis=-1)[:, None, :]
img[h // 2:] = (70, 72, 75)
img[120:160, 60:130] = (160, 40, 35)
img[110:150, 200:280] = (40, 70, 160)
(out_dir / "clear.ppm").write_bytes(write_ppm(img))

for kind in ("fog", "rain", "snow"):
    out = apply_weather(img, WeatherParams(kind=kind, seed=5))
    again = apply_weather(img, WeatherParams(kind=kind, seed=5))
    assert out.tobytes() == again.tobytes(), "same seed must reproduce bytes"
    path = out_dir / f"{kind}.ppm"
    path.write_bytes(write_ppm(out))
    delta = float(out.mean()) - float(img.mean())
    print(f"{kind:>4}: mean brightness {img.mean():.1f} -> {out.mean():.1f} "
          f"({delta:+.1f}), wrote {path}")

faint = apply_weather(img, WeatherParams(kind="fog", fog_density=0.0, seed=5))
assert faint.tobytes() == img.tobytes()
print("fog density 0 is byte-identical to the input")
