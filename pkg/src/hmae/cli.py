"""``hmae`` command line.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys

from .config import ConfigError, RunConfig, load_config


def _limit_threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _cmd_generate(cfg, a):
    from .pipeline import run_generate

    m = run_generate(cfg, a.slides, a.out)
    print(a.out.rstrip("/") + "/manifest.csv")
    return m


def _cmd_pretrain(cfg, a):
    from .corpus import CorpusManifest
    from .pipeline import load_manifest_images, pretrain

    manifest = CorpusManifest.read(a.manifest)
    if not len(manifest):
        raise ConfigError(f"{a.manifest}: manifest has no rows")
    images = load_manifest_images(manifest, cfg.vit().input_size)
    hist = pretrain(cfg, images, a.out, resume=a.resume, loss_log=a.log)
    if hist:
        print(f"final loss {hist[-1][1]:.6f}")


def _cmd_embed(cfg, a):
    from .pipeline import run_embed

    print(len(run_embed(cfg, a.checkpoint, a.manifest, a.out)))


def _cmd_probe_eval(cfg, a):
    from .pipeline import run_probe_eval

    run_probe_eval(cfg, a.embeddings, a.out)
    print(a.out)


def _cmd_attend(cfg, a):
    from .pipeline import run_attend

    for p in run_attend(cfg, a.checkpoint, a.image, a.out, fmt=a.format):
        print(p)


def _cmd_project(cfg, a):
    from .pipeline import run_project

    run_project(cfg, a.embeddings, a.out, png=a.png)
    print(a.out)


def _cmd_synth(cfg, a):
    import numpy as np

    from .synthetic import labeled_rois, tissue_slide, write_labeled_manifest, write_slides

    rng = np.random.default_rng(cfg.seed)
    slides = [tissue_slide(a.slide_size, a.slide_size, rng, slide_id=f"slide{i:02d}") for i in range(a.slides)]
    write_slides(slides, f"{a.out}/slides")
    m = write_labeled_manifest(labeled_rois(cfg.probe.classes, a.per_class, rng), f"{a.out}/labeled")
    print(f"{a.out}/slides")
    print(f"{a.out}/labeled/labeled.csv ({len(m)} regions)")


def _cmd_show_config(cfg, a):
    print(json.dumps(cfg.to_dict(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set training.steps=500 (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hmae", description="Masked-autoencoder pretraining on random slide crops "
                                "and frozen-embedding evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="extract random quality-filtered crops from slides")
    s.add_argument("--slides", required=True, help="directory of slide images (PNG)")
    s.add_argument("--out", required=True, help="output directory for crops and manifest.csv")
    s.set_defaults(func=_cmd_generate)

    s = sub.add_parser("pretrain", parents=[common], help="self-supervised MAE pretraining")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    s.set_defaults(func=_cmd_pretrain)

    s = sub.add_parser("embed", parents=[common], help="embed labeled regions with the frozen encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True, help="labeled manifest CSV")
    s.add_argument("--out", required=True, help="HMEB embedding store")
    s.set_defaults(func=_cmd_embed)

    s = sub.add_parser("probe-eval", parents=[common], help="repeated split/train/evaluate of a probe")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(func=_cmd_probe_eval)

    s = sub.add_parser("attend", parents=[common], help="export final-block CLS attention heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--format", choices=["png", "pgm"], default="png")
    s.set_defaults(func=_cmd_attend)

    s = sub.add_parser("project", parents=[common], help="t-SNE projection of embeddings to CSV")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True, help="CSV path (id,x,y,label)")
    s.add_argument("--png", help="optional scatter plot PNG")
    s.set_defaults(func=_cmd_project)

    s = sub.add_parser("synth", parents=[common], help="write synthetic slides and labeled regions (demo data)")
    s.add_argument("--out", required=True)
    s.add_argument("--slides", type=int, default=2)
    s.add_argument("--slide-size", type=int, default=768)
    s.add_argument("--per-class", type=int, default=20)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    s.set_defaults(func=_cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg: RunConfig = load_config(args.config, args.set, args.seed)
        with _limit_threads(args.threads):
            args.func(cfg, args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"hmae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"hmae {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
