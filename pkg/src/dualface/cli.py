"""Command line entry point: ``dualface {train,ablate,infer,eval}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import AblationFlags, ConfigError, load_config
from .data import batch_iter, load_image, luminance, make_contour, resize, save_image
from .metrics import report
from .plotting import plot_losses, plot_metrics, save_trace_grid
from .trainer import (
    STANDARD_GRID,
    build_samples,
    evaluate,
    load_checkpoint,
    mean_rows,
    models_from_checkpoint,
    prepare_frozen,
    refine,
    run_ablation,
    train,
)

DEFAULT_CACHE = "runs/cache"


def parse_grid(text: str) -> list[AblationFlags]:
    """``standard`` (FFF,TFF,TTF,TTT) or a comma list of T/F tags such as ``FFF,TFF``."""
    if text.strip().lower() == "standard":
        return list(STANDARD_GRID)
    tags = [t for t in text.split(",") if t.strip()]
    if not tags:
        raise ConfigError("empty ablation grid")
    return [AblationFlags.from_tag(t) for t in tags]


def _write_eval_report(models, samples, tag, out_csv, n_grid=4):
    ev = evaluate(models, samples, tag=tag)
    csv_path, txt_path = report([ev.row], out_csv)
    plot_metrics([ev.row], csv_path.with_suffix(".png"))
    batch = next(batch_iter(samples[:n_grid], n_grid, models.config.scale.contour_input_resolution))
    with torch.no_grad():
        trace = refine(models, batch.contour, batch.identity, models.config.refinement_steps)
    save_trace_grid(csv_path.parent / "trace.png", batch.contour, batch.identity, [s.output for s in trace.steps])
    print(txt_path.read_text(), end="")
    return ev


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    out_dir = Path(args.out_dir or config.out_dir)
    trainer = train(config, out_dir=out_dir, cache_dir=args.cache_dir)
    plot_losses(out_dir / "losses.csv")
    _write_eval_report(trainer.models, build_samples(config), config.ablation.tag(), out_dir / "metrics.csv")
    print(f"checkpoint: {out_dir / 'final.pt'}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    grid = parse_grid(args.grid)
    out_dir = Path(args.out_dir or config.out_dir)
    frozen = prepare_frozen(config, args.cache_dir)
    seeds = args.seeds or [config.seed]
    per_seed = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        sub = out_dir / f"seed{seed}" if len(seeds) > 1 else out_dir
        per_seed.append(run_ablation(cfg, grid, frozen, build_samples(cfg), sub))
    rows = [mean_rows([results[i].row for results in per_seed], f.tag()) for i, f in enumerate(grid)]
    csv_path, txt_path = report(rows, out_dir / "ablation.csv")
    plot_metrics(rows, csv_path.with_suffix(".png"))
    print(txt_path.read_text(), end="")
    return 0


def _load_contour(path, modality: str, mask_classes: int, lr_size: int, from_face: bool):
    img = load_image(path)
    if from_face:
        return make_contour(img, modality, lr_size=lr_size, mask_classes=mask_classes).image
    if modality == "lr":
        return img
    gray = luminance(img)
    if modality == "sketch":
        return gray
    # mask files store the class index as an evenly spaced gray level
    idx = (gray[0] * (mask_classes - 1)).round().long()
    return torch.nn.functional.one_hot(idx, mask_classes).permute(2, 0, 1).float()


def cmd_infer(args) -> int:
    trainer = models_from_checkpoint(load_checkpoint(args.checkpoint), args.set)
    models = trainer.models
    models.train(False)
    cfg = models.config
    res = cfg.scale.contour_input_resolution
    contour = _load_contour(args.contour, cfg.modality, cfg.mask_classes, cfg.scale.lr_contour_size, args.from_face)
    mode = "bicubic" if cfg.modality == "lr" else "nearest"
    contour = resize(contour.unsqueeze(0), res, mode)
    identity = resize(load_image(args.identity).unsqueeze(0), cfg.scale.generator_resolution)
    with torch.no_grad():
        trace = refine(models, contour, identity, cfg.refinement_steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(trace.final[0], out)
    grid = save_trace_grid(out.with_name(out.stem + "_trace.png"), contour, identity, [s.output for s in trace.steps])
    print(f"wrote {out} and {grid}")
    return 0


def cmd_eval(args) -> int:
    trainer = models_from_checkpoint(load_checkpoint(args.checkpoint), args.set)
    cfg = trainer.models.config
    samples = build_samples(cfg, held_out=args.held_out)
    _write_eval_report(trainer.models, samples, args.tag or cfg.ablation.tag(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualface", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)"
        )

    p = sub.add_parser("train", help="train one model and write losses, metrics and figures")
    common(p)
    p.add_argument("--out-dir", help="defaults to the config's out_dir")
    p.add_argument("--cache-dir", default=DEFAULT_CACHE, help="where pretrained frozen parts are cached")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train every flag combination of a grid")
    common(p)
    p.add_argument("--grid", default="standard", help="'standard' or comma list of tags like FFF,TFF,TTF,TTT")
    p.add_argument("--seeds", type=int, nargs="+", help="average each cell over these seeds")
    p.add_argument("--out-dir")
    p.add_argument("--cache-dir", default=DEFAULT_CACHE)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="synthesize one face from a contour and an identity image")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--contour", required=True, help="contour image (or a face photo with --from-face)")
    p.add_argument("--identity", required=True, help="identity face image")
    p.add_argument("--out", required=True, help="output image path; a _trace.png grid is written beside it")
    p.add_argument("--from-face", action="store_true", help="derive the contour from a face photo")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint and write metrics.csv/.txt plus figures")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path, or a directory")
    p.add_argument("--held-out", action="store_true", help="use unseen procedural identities")
    p.add_argument("--tag", help="row label (defaults to the ablation tag)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
