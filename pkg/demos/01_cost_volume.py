"""Build a cost volume for one test image and look at what it contains.

A test image is compared with two normal templates of the same texture.
Every test location is matched against every template location, so the
volume has one channel per (template, location) pair. Trimming keeps the
K cheapest matches per test location, and the minimum over channels is the
initial anomaly map, which already lights up the defect.
"""

import numpy as np

from costvol_ad.costvol import build_cost_volume, similarity_volume
from costvol_ad.encoders import PatchifyEncoder, extract_features
from costvol_ad.smoke import held_out_set, normal_images

encoder = PatchifyEncoder(patch=4)
layers = [0, 1]

normals = [p for p in normal_images(4, 64, seed=0) if p.category == "stripes"]
test = next(s for s in held_out_set().samples if s.category == "stripes" and s.is_anomalous)

f_test = extract_features(test.image, encoder, layers)
f_templates = [extract_features(p.image, encoder, layers) for p in normals[:2]]

sim = similarity_volume(f_test, f_templates)
print(f"similarity volume (template loc, template, layer, test loc): {sim.values.shape}")
print(f"  cosine range: [{sim.values.min():.3f}, {sim.values.max():.3f}]")

full, mbar_full = build_cost_volume(f_test, f_templates, K=0)
trimmed, mbar = build_cost_volume(f_test, f_templates, K=32)
print(f"untrimmed volume: {full.values.shape}, trimmed to K=32: {trimmed.values.shape}")
print(f"trimming keeps the column minimum: {np.array_equal(mbar, mbar_full)}")

# the initial map is per layer; average layers and compare inside/outside the defect
grid = mbar.mean(axis=0)
h, w = grid.shape
cells = test.mask.reshape(h, test.mask.shape[0] // h, w, test.mask.shape[1] // w).max(axis=(1, 3)).astype(bool)
print(f"mean initial cost inside the defect:  {grid[cells].mean():.3f}")
print(f"mean initial cost outside the defect: {grid[~cells].mean():.3f}")

_, self_map = build_cost_volume(f_test, [f_test])
print(f"matching an image against itself gives an all-zero map: {bool(np.all(self_map == 0))}")
