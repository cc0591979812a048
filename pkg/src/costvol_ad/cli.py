"""Command-line entry point: ``costvol-ad <subcommand>``.

Exit codes: 0 success, 1 validation error (bad config, missing or unreadable inputs, bad
dataset layout), 2 runtime failure. Logs go to stderr; artifacts go to the
run directory, which always receives a ``config.echo``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config, load_config, parse_config
from .errors import ConfigError, DatasetError

log = logging.getLogger("costvol_ad")


def _resolve_config(args, required: bool) -> RunConfig:
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this subcommand")
        return parse_config("", args.override)
    return load_config(args.config, args.override)


def _echo(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(format_config(cfg))
    return out


def cmd_train(args) -> int:
    from .data import scan_dataset
    from .smoke import write_dataset
    from .train import train

    cfg = _resolve_config(args, required=True)
    out = Path(args.out or cfg.run.output_dir)
    root = args.dataset or cfg.run.dataset_root
    if args.smoke:
        root = write_dataset(out / "smoke_data", seed=cfg.run.seed)
        cfg.run.dataset_root = str(root)
    if not root:
        raise ConfigError("no dataset: pass --dataset, set run.dataset_root or use --smoke")
    _echo(cfg, out)
    ckpt = train(cfg, scan_dataset(root, (cfg.run.image_size,) * 2), run_dir=out, resume_from=args.resume)
    print(ckpt)
    return 0


def cmd_infer(args) -> int:
    from .data import scan_dataset
    from .infer import AnomalyDetector
    from .pipeline import infer_dataset
    from .train import encoder_from_config, model_from_checkpoint

    cfg = _resolve_config(args, required=True)
    model, payload = model_from_checkpoint(args.checkpoint)
    trained = parse_config(payload["config"])
    # the network fixes the encoder, template count and trimming
    cfg.encoder, cfg.templates = trained.encoder, trained.templates
    if args.lam is not None:
        cfg.infer.lam = args.lam
    cfg.validate()
    out = _echo(cfg, args.out or cfg.run.output_dir)
    root = args.dataset or cfg.run.dataset_root
    if not root:
        raise ConfigError("no dataset: pass --dataset or set run.dataset_root")
    detector = AnomalyDetector(model, encoder_from_config(cfg), cfg.encoder.layers, payload["filter_config"]["K"])
    baseline = args.baseline_dir or cfg.infer.baseline_dir or None
    path = infer_dataset(detector, scan_dataset(root, (cfg.run.image_size,) * 2), cfg, out,
                         baseline_dir=baseline, templates_root=args.templates_root, dump_volumes=args.dump_volume)
    print(path)
    return 0


def cmd_evaluate(args) -> int:
    from .data import scan_dataset
    from .metrics import format_table, mean_result
    from .pipeline import evaluate_run

    cfg = _resolve_config(args, required=False)
    fpr_limit = args.fpr_limit if args.fpr_limit is not None else cfg.infer.fpr_limit
    results = evaluate_run(args.scores, args.maps, scan_dataset(args.dataset), fpr_limit=fpr_limit,
                           score_column=args.score_column, max_pixels=None if args.exact else 1_000_000)
    table = format_table(results)
    print(table)
    if args.out:
        out = _echo(cfg, args.out)
        (out / "results.txt").write_text(table + "\n")
        rows = dict(results)
        if len(results) > 1:
            rows["mean"] = mean_result(results)
        with open(out / "results.csv", "w") as fh:
            names = list(next(iter(rows.values())).as_dict())
            fh.write("category," + ",".join(names) + "\n")
            for cat, r in rows.items():
                fh.write(cat + "," + ",".join(f"{v:.6f}" for v in r.as_dict().values()) + "\n")
    return 0


def cmd_plot_kde(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import read_scores
    from .metrics import kde_export

    cfg = _resolve_config(args, required=False)
    out = _echo(cfg, args.out)
    rows = [r for r in read_scores(args.scores) if r["label"] is not None]
    if not rows:
        raise DatasetError(f"{args.scores} has no labelled rows")
    scores = np.array([r[args.score_column] for r in rows])
    labels = np.array([r["label"] for r in rows])
    table = kde_export(scores, labels)
    cols = [k for k in ("normal", "anomalous") if k in table]
    with open(out / "kde_image.csv", "w") as fh:
        fh.write("score," + ",".join(cols) + "\n")
        for i, g in enumerate(table["grid"]):
            fh.write(f"{g:.6g}," + ",".join(f"{table[c][i]:.6g}" for c in cols) + "\n")
    fig, ax = plt.subplots(figsize=(5, 3))
    for c in cols:
        ax.plot(table["grid"], table[c], label=c)
        ax.fill_between(table["grid"], table[c], alpha=0.3)
    ax.set_xlabel("image score")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "kde_image.png", dpi=120)
    plt.close(fig)
    print(out / "kde_image.csv")
    return 0


def cmd_synth_preview(args) -> int:
    from .data import save_image, scan_dataset
    from .smoke import normal_images
    from .synth import NormalImage, build_epoch
    from .train import load_train_pool, synth_params_from_config

    cfg = _resolve_config(args, required=False)
    out = _echo(cfg, args.out)
    if args.dataset:
        pool = load_train_pool(scan_dataset(args.dataset), cfg.run.image_size)
    else:
        pool = normal_images(16, 64, cfg.run.seed)
    params = synth_params_from_config(cfg)
    params.anomaly_probability = 1.0
    for k, s in enumerate(build_epoch(pool, params, seed=args.seed, num_samples=args.count)):
        save_image(out / f"{k:03d}_{s.category}_image.png", s.image)
        save_image(out / f"{k:03d}_{s.category}_mask.png", s.mask.astype(float))
    print(out)
    return 0


def cmd_dump_volume(args) -> int:
    from .costvol import build_cost_volume
    from .data import load_image, write_volume
    from .encoders import extract_features
    from .train import encoder_from_config, resolve_K

    cfg = _resolve_config(args, required=True)
    size = (cfg.run.image_size,) * 2
    encoder = encoder_from_config(cfg)
    layers = cfg.encoder.layers
    f_S = extract_features(load_image(args.image, size), encoder, layers, str(args.image))
    f_T = [extract_features(load_image(p, size), encoder, layers, str(p)) for p in args.templates]
    H, W = f_S.grid_shape
    cfg.templates.N = len(f_T)
    volume, _ = build_cost_volume(f_S, f_T, resolve_K(cfg, H * W))
    _echo(cfg, Path(args.out).parent)
    write_volume(args.out, volume)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costvol-ad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", type=Path, required=False,
                       help="run configuration file" + (" (required)" if config_required else ""))
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("train", help="train the cost-volume filter")
    common(p, True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path)
    p.add_argument("--smoke", action="store_true", help="generate and train on the synthetic smoke dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score a dataset's test split")
    common(p, True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--baseline-dir", type=Path)
    p.add_argument("--templates-root", type=Path)
    p.add_argument("--lam", type=float)
    p.add_argument("--dump-volume", action="store_true", help="also write each cost volume (.cvol)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compute the seven evaluation metrics")
    common(p, False)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--maps", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True, help="dataset root holding ground-truth masks")
    p.add_argument("--score-column", default="fused_score")
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--exact", action="store_true", help="no pixel subsampling")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-kde", help="KDE curves of image scores per class")
    common(p, False)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--score-column", default="fused_score")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot_kde)

    p = sub.add_parser("synth-preview", help="write synthetic anomaly/mask pairs")
    common(p, False)
    p.add_argument("--dataset", type=Path, help="defaults to the built-in smoke textures")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_preview)

    p = sub.add_parser("dump-volume", help="build and save one cost volume")
    common(p, True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--templates", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_volume)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
