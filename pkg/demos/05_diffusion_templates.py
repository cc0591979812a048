"""Templates from one-shot denoising of a noised test image.

A reference noise predictor stands in for a trained denoiser: it steers the
reconstruction towards a known normal image, blurred more at noisier steps.
The reconstruction at step 0 is the sharpest template and is always used;
the remaining templates are drawn from intermediate steps.
"""

import numpy as np

from costvol_ad.costvol import build_cost_volume
from costvol_ad.encoders import (
    DiffusionSchedule,
    PatchifyEncoder,
    ReferenceNoisePredictor,
    TemplatePool,
    extract_features,
    reconstruction_pool,
    sample_templates,
)
from costvol_ad.smoke import held_out_set, normal_images

test = next(s for s in held_out_set().samples if s.is_anomalous)
# the defect-free image the anomaly was synthesized on
clean = next(p.image for p in normal_images(24, 64, seed=1000, prefix="test") if p.image_id == test.base_id
             and p.category == test.category)

sched = DiffusionSchedule.linear(1000)
predictor = ReferenceNoisePredictor(clean, sched, blur_per_step=0.005)
steps = [0, 100, 200, 300]
pool = TemplatePool(reconstructions=reconstruction_pool(test.image, predictor, sched, steps, seed=0))
for t, img in pool.reconstructions.items():
    inside = np.abs(img - test.image)[:, test.mask == 1].mean()
    outside = np.abs(img - test.image)[:, test.mask == 0].mean()
    print(f"step {t:3d}: mean |template - input| inside defect {inside:.3f}, outside {outside:.3f}")

chosen = sample_templates("reconstruction", "", pool, N=3, seed=0)
print(f"chosen templates: {chosen.provenance}")

encoder = PatchifyEncoder(patch=4)
f_test = extract_features(test.image, encoder, [0, 1])
f_templates = [extract_features(img, encoder, [0, 1]) for img in chosen.templates]
_, mbar = build_cost_volume(f_test, f_templates, K=32)
grid = mbar.mean(0)
h, w = grid.shape
cells = test.mask.reshape(h, 64 // h, w, 64 // w).max(axis=(1, 3)).astype(bool)
print(f"initial cost inside defect {grid[cells].mean():.3f}, outside {grid[~cells].mean():.3f}")
