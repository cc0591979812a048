"""Train on the synthetic two-texture dataset and score held-out anomalies.

Takes about half a minute on one CPU core. Prints the loss curve summary,
pixel and image AUROC, and writes a few heatmaps next to the script's
output directory (first argument, default ./demo_out).
"""

import sys
from pathlib import Path

import numpy as np

from costvol_ad.config import parse_config
from costvol_ad.data import save_image
from costvol_ad.infer import AnomalyDetector
from costvol_ad.metrics import auroc
from costvol_ad.pipeline import score_samples
from costvol_ad.smoke import held_out_set, normal_images
from costvol_ad.train import Trainer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "smoke"
cfg = parse_config("""
[trainer]
epochs = 1000
max_steps = 200
checkpoint_every_epoch = false
[templates]
N = 2
K = 32
[encoder]
layers = 0,1
patch = 4
[filter]
base_channels = 8
num_scales = 3
""")

trainer = Trainer(cfg, normal_images(16, 64, seed=0), out / "run")
trainer.run()
losses = [r["total"] for r in trainer.history]
print(f"{len(losses)} steps, loss {losses[0]:.3f} -> {np.mean(losses[-10:]):.3f} (mean of last 10)")

test = held_out_set()
detector = AnomalyDetector(trainer.model, trainer.encoder, trainer.layers, trainer.K)
maps, scores = score_samples(detector, test.samples, trainer.normal_features, cfg.templates.N)
masks = np.stack([s.mask for s in test.samples])
print(f"pixel AUROC {auroc(maps, masks):.4f}, image AUROC {auroc(scores, test.labels):.4f}")

for k, s in enumerate(test.samples[:4]):
    heat = np.stack([maps[k], np.zeros_like(maps[k]), 1 - maps[k]])
    save_image(out / f"{k}_input.png", s.image)
    save_image(out / f"{k}_heat.png", heat)
    save_image(out / f"{k}_mask.png", np.repeat(s.mask[None].astype(float), 3, 0))
print(f"heatmaps in {out}")
