"""Build a synthetic scene and walk through the semantic-point-grid encoding.

Run from the repository root:

    python demos/01_spg_encoding.py

Writes `demo_out/scene.spg` (binary grid) and `demo_out/scene_bev.ppm`
(a BEV figure with the ground-truth boxes).
"""

from pathlib import Path

import numpy as np

from spgfuse.augment import write_ppm
from spgfuse.render import render_bev
from spgfuse.spg import (
    CH_NUM_POINTS,
    CH_OCCUPANCY,
    CH_SEMANTIC,
    GridSpec,
    NormConfig,
    SpgTensor,
    assemble_spg,
)
from spgfuse.synthgen import SceneConfig, generate_scene

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

grid = GridSpec()  # 128 x 128 cells over [0, 80] x [-40, 40] metres
scene = generate_scene(SceneConfig(num_vehicles=(4, 6), seed=42), grid)
print(f"scene: {len(scene.cloud)} radar points, {len(scene.labels)} vehicles, "
      f"{(scene.point_owner < 0).sum()} clutter points")

# The full 22-channel grid: 9 semantic + occupancy + 12 point-feature channels.
spg = assemble_spg(scene.cloud, scene.mask, scene.calib, grid, NormConfig())
occupied = int(spg.channels[CH_OCCUPANCY].sum())
print(f"grid: {spg.channels.shape}, {occupied} occupied cells")

car_channel = spg.channels[CH_SEMANTIC][7]
print(f"cells with car semantics: {(car_channel > 0).sum()} "
      f"(max per-cell car score {car_channel.max():.2f})")

# Radar-only variant of the same frame: semantic channels stay zero.
bare = assemble_spg(scene.cloud, None, None, grid, NormConfig())
assert not bare.channels[CH_SEMANTIC].any()
np.testing.assert_array_equal(bare.channels[9:], spg.channels[9:])
print("radar-only encoding drops channels 0..8, leaves 9..21 untouched")

(out_dir / "scene.spg").write_bytes(spg.to_bytes())
img = render_bev(scene.cloud, scene.labels, [], grid)
(out_dir / "scene_bev.ppm").write_bytes(write_ppm(img))
print(f"wrote {out_dir / 'scene.spg'} and {out_dir / 'scene_bev.ppm'}")
