import json

import numpy as np
import pytest
import torch

from costvol_ad.config import RunConfig, parse_config
from costvol_ad.data import scan_dataset
from costvol_ad.errors import DatasetError, NumericError
from costvol_ad.smoke import normal_images
from costvol_ad.synth import SynthParams, synthesize
from costvol_ad.train import (
    CKPT_MAGIC,
    Trainer,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

TINY = """
[run]
seed = 3
[trainer]
epochs = 1
batch_size = 4
[templates]
N = 2
K = 16
[encoder]
layers = 0,1
patch = 4
[filter]
base_channels = 4
num_scales = 2
guidance_channels = 2
"""


def tiny(*overrides):
    return parse_config(TINY, overrides)


@pytest.fixture(scope="module")
def pool():
    return normal_images(4, 32, seed=0)


def weights(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_weights(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_documented_defaults():
    cfg = RunConfig()
    assert (cfg.trainer.epochs, cfg.trainer.batch_size, cfg.trainer.lr) == (40, 8, 1e-3)
    assert (cfg.templates.N, len(cfg.encoder.layers), cfg.loss.alpha, cfg.loss.gamma0) == (3, 4, 0.1, 3.0)


def test_run_writes_artifacts(tmp_path, pool):
    tr = Trainer(tiny(), pool, tmp_path)
    last = tr.run()
    assert last == tmp_path / "ckpt" / "epoch_001.ckpt"
    assert (tmp_path / "ckpt" / "best.ckpt").exists()
    assert "epochs = 1" in (tmp_path / "config.echo").read_text()
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(records) == 2
    for key in ("step", "epoch", "focal", "ce", "soft_iou", "ssim", "total", "effective_gamma", "grad_norm"):
        assert key in records[0]
    assert last.read_bytes()[:8] == CKPT_MAGIC


def test_resume_with_no_further_epochs_is_identity(tmp_path, pool):
    ckpt = Trainer(tiny(), pool, tmp_path / "a").run()
    saved = load_checkpoint(ckpt)["model"]
    tr = Trainer(tiny(), pool, tmp_path / "b")
    tr.run(resume_from=ckpt)
    assert same_weights(weights(tr.model), saved)


def test_resume_matches_uninterrupted_run(tmp_path, pool):
    full = Trainer(tiny("trainer.epochs=2"), pool, tmp_path / "full")
    full.run()
    first = Trainer(tiny("trainer.epochs=1"), pool, tmp_path / "half").run()
    resumed = Trainer(tiny("trainer.epochs=2"), pool, tmp_path / "resumed")
    resumed.run(resume_from=first)
    assert same_weights(weights(full.model), weights(resumed.model))


def test_checkpoint_round_trip_forward(tmp_path, pool):
    tr = Trainer(tiny(), pool, tmp_path)
    ckpt = tr.run()
    item = tr.prepare(tr.epoch_samples(0)[0], seed=1)
    vol, mbar, feats, _, _ = tr.collate([item])
    tr.model.eval()
    before = tr.model(vol, mbar, feats).probs
    model, _ = model_from_checkpoint(ckpt)
    after = model.eval()(vol, mbar, feats).probs
    assert torch.equal(before, after)


def test_scheduler_halves_on_plateau(pool, tmp_path):
    tr = Trainer(tiny("trainer.patience=2"), pool, tmp_path)
    lrs = []
    for loss in [1.0, 0.5, 0.4999, 0.4998, 0.4997, 0.4996, 0.4995, 0.3]:
        tr.scheduler.step(loss)
        lrs.append(tr.optimizer.param_groups[0]["lr"])
    # improvements below 0.1% relative count as stagnation; the third stagnant epoch halves
    assert lrs == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 5e-4]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_hybrid_alternates(pool, tmp_path):
    tr = Trainer(tiny("templates.mode=hybrid", "templates.steps=5"), pool, tmp_path)
    samples = tr.epoch_samples(0)
    modes = []
    for step in range(10):
        item = tr.prepare(samples[step % len(samples)], seed=step, step=step)
        modes.append(tr.training_step([item]).template_mode)
    assert modes == ["reconstruction", "embedding"] * 5


def test_gradient_norm_finite_every_step(pool, tmp_path):
    tr = Trainer(tiny(), pool, tmp_path)
    samples = tr.epoch_samples(0)
    for k in range(3):
        r = tr.training_step([tr.prepare(samples[k], seed=k)])
        assert np.isfinite(r.grad_norm) and np.isfinite(r.losses["total"])


def test_memorizable_set_loss_halves(pool, tmp_path):
    tr = Trainer(tiny("run.seed=0"), pool, tmp_path)
    params = SynthParams(anomaly_probability=1.0)
    fixed = []
    for k in range(4):
        base = pool[k * 2]
        other = pool[-1 - k]
        s = synthesize(base.image, other.image, params, seed=k, label=base.label, base_id=base.image_id,
                       category=base.category)
        fixed.append(tr.prepare(s, seed=k))
    losses = [tr.training_step(fixed).losses["total"] for _ in range(100)]
    assert losses[-1] <= 0.5 * losses[0]


def test_non_finite_aborts_and_keeps_checkpoint(pool, tmp_path):
    tr = Trainer(tiny(), pool, tmp_path)
    ckpt = tr.run()
    good = ckpt.read_bytes()
    with torch.no_grad():
        next(tr.model.parameters()).fill_(float("nan"))
    with pytest.raises(NumericError):
        tr.training_step([tr.prepare(tr.epoch_samples(0)[0], seed=0)])
    assert ckpt.read_bytes() == good


def test_dataset_layout_errors(tmp_path):
    (tmp_path / "cat" / "test" / "good").mkdir(parents=True)
    from PIL import Image

    Image.new("RGB", (8, 8)).save(tmp_path / "cat" / "test" / "good" / "a.png")
    with pytest.raises(DatasetError, match="no train/good images"):
        train(tiny(), scan_dataset(tmp_path), tmp_path / "run")
