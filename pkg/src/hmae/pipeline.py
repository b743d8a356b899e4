"""End-to-end steps behind the CLI subcommands."""
from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, model_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, RunConfig
from .corpus import (CorpusManifest, fit_size_distribution, generate_corpus, load_slides, read_roi_sizes,
                     resize_bilinear, stratified_split_labels)
from .metrics import MetricsReport, RunResult, export_report, repeated_runs
from .optim import AdamWState, cosine_lr
from .probe import EmbeddingRecord, coarsen_labels, embed_region, predict, train_probe
from .store import read_embeddings, write_embeddings
from .tsne import export_projection, tsne
from .vit import MaeModel, attention_maps, pretrain_step

log = logging.getLogger("hmae")


# -- generate -----------------------------------------------------------------
def run_generate(cfg: RunConfig, slides_dir, out_dir) -> CorpusManifest:
    slides = load_slides(slides_dir)
    vit = cfg.vit()
    c = cfg.corpus
    dist = cfg.size_distribution()
    if c.roi_sizes_csv:
        dist = fit_size_distribution(read_roi_sizes(c.roi_sizes_csv), patch_size=vit.patch_size)
    manifest = generate_corpus(slides, dist, c.count, c.threshold, cfg.seed, out_dir,
                               input_size=vit.input_size, workers=c.workers, min_side=2 * vit.patch_size)
    print(f"accepted {len(manifest)} of {manifest.attempts} candidates "
          f"(acceptance rate {manifest.acceptance_rate:.4f})", file=sys.stderr)
    return manifest


# -- pretrain -----------------------------------------------------------------
def load_manifest_images(manifest: CorpusManifest, input_size: int) -> np.ndarray:
    imgs = []
    for row in manifest.rows:
        img = manifest.load_image(row)
        if img.shape[:2] != (input_size, input_size):
            img = resize_bilinear(img, input_size)
        imgs.append(img)
    return np.stack(imgs).astype(np.float32) / 255.0


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    gen = np.random.default_rng([seed, 7, step])
    return gen.choice(n, size=batch_size, replace=n < batch_size)


def pretrain(cfg: RunConfig, images: np.ndarray, out_checkpoint, resume: Optional[str] = None,
             loss_log=None) -> list[tuple[int, float]]:
    """Train for ``training.steps`` total steps; writes the checkpoint atomically.

    Returns ``(step, loss)`` pairs for the steps run in this call.
    """
    vit = cfg.vit()
    t = cfg.training
    if resume:
        ckpt = load_checkpoint(resume, expected_config=vit)
        model, opt = restore_model(ckpt)
        start = ckpt.step
        if opt is None:
            raise CheckpointError(f"{resume}: checkpoint has no optimizer state to resume from")
    else:
        model = MaeModel(vit, seed=cfg.seed)
        opt = AdamWState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)
        start = 0
    history = []
    log_path = Path(loss_log) if loss_log else Path(str(out_checkpoint) + ".loss.csv")
    mode = "a" if resume and log_path.exists() else "w"
    with open(log_path, mode, encoding="utf-8", newline="\n") as fh:
        if mode == "w":
            fh.write("step,loss\n")
        for step in range(start, t.steps):
            idx = batch_indices(len(images), t.batch_size, cfg.seed, step)
            lr = cosine_lr(step, t.lr, t.steps, t.warmup_steps, t.min_lr)
            loss = pretrain_step(model, images[idx], step, cfg.seed, opt, lr=lr, indices=idx)
            history.append((step, loss))
            if t.log_every and (step % t.log_every == 0 or step == t.steps - 1):
                fh.write(f"{step},{loss!r}\n")
                log.info("step %d loss %.6f lr %.3e", step, loss, lr)
            if t.checkpoint_every and (step + 1) % t.checkpoint_every == 0 and step + 1 < t.steps:
                save_checkpoint(out_checkpoint, model_checkpoint(model, step + 1, opt, cfg.seed))
    save_checkpoint(out_checkpoint, model_checkpoint(model, max(start, t.steps), opt, cfg.seed))
    return history


# -- embed --------------------------------------------------------------------
def label_index(label: Optional[str], classes: list) -> Optional[int]:
    if label is None:
        return None
    if label in classes:
        return classes.index(label)
    raise ConfigError(f"label {label!r} is not one of the configured classes {classes}")


def run_embed(cfg: RunConfig, checkpoint, manifest_path, out_path) -> list[EmbeddingRecord]:
    model, _ = restore_model(load_checkpoint(checkpoint))
    manifest = CorpusManifest.read(manifest_path, unique_ids=False)
    classes = list(cfg.probe.classes)
    records = []
    for row in manifest.rows:
        vec = embed_region(model, manifest.load_image(row), mode=cfg.probe.region_mode)
        records.append(EmbeddingRecord(row.id, vec, label_index(row.label, classes), row.split))
    write_embeddings(records, out_path)
    return records


# -- probe-eval ---------------------------------------------------------------
def probe_experiment(records, n_classes: int, cfg: RunConfig):
    """Closure over labeled records: split, train probe, score the test split."""
    labeled = [r for r in records if r.label is not None]
    if not labeled:
        raise ConfigError("no labeled embeddings to evaluate")
    X = np.stack([r.vector for r in labeled]).astype(np.float32)
    y = np.array([r.label for r in labeled], dtype=np.int64)
    fractions = list(cfg.eval.fractions)

    def run(seed: int) -> RunResult:
        tags = np.array(stratified_split_labels(y.tolist(), fractions, np.random.default_rng(seed)))
        tr, va, te = tags == "train", tags == "val", tags == "test"
        probe = train_probe(X[tr], y[tr], n_classes, cfg.probe_config(seed),
                            X[va] if va.any() else None, y[va] if va.any() else None)
        scores, _ = predict(probe, X[te])
        return RunResult.from_predictions(y[te], scores, n_classes)

    return run


def run_probe_eval(cfg: RunConfig, embeddings_path, out_report) -> MetricsReport:
    records = read_embeddings(embeddings_path)
    mapping = cfg.label_mapping()
    classes = list(mapping.classes)
    if cfg.probe.task == "coarse":
        records, coarse = coarsen_labels(records, mapping)
        classes = list(coarse.classes)
    task = f"{cfg.probe.task}-{len(classes)}class-{cfg.probe.kind}"
    report = repeated_runs(probe_experiment(records, len(classes), cfg), cfg.eval.runs, cfg.seed,
                           task=task, classes=classes, config_digest=cfg.digest())
    export_report(report, out_report)
    for line in report.summary_lines():
        print(line, file=sys.stderr)
    return report


# -- attend -------------------------------------------------------------------
def _to_uint8_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.floor((m - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def upscale_nearest(m: np.ndarray, size: int) -> np.ndarray:
    reps = size // m.shape[0]
    return np.repeat(np.repeat(m, reps, axis=0), reps, axis=1)


def write_gray(img: np.ndarray, path: Path, fmt: str) -> Path:
    if fmt == "pgm":
        h, w = img.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    else:
        Image.fromarray(img, mode="L").save(path, format="PNG")
    return path


def run_attend(cfg: RunConfig, checkpoint, image_path, out_dir, fmt: str = "png") -> list[Path]:
    model, _ = restore_model(load_checkpoint(checkpoint))
    vit = model.config
    with Image.open(image_path) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if img.shape[:2] != (vit.input_size, vit.input_size):
        img = resize_bilinear(img, vit.input_size)
    maps = attention_maps(model, img.astype(np.float32) / 255.0)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if fmt == "pgm" else "png"
    paths = []
    for h, m in enumerate(maps.cls_maps):
        paths.append(write_gray(_to_uint8_map(upscale_nearest(m, vit.input_size)), out_dir / f"head_{h:02d}.{ext}", fmt))
    paths.append(write_gray(_to_uint8_map(upscale_nearest(maps.mean_map, vit.input_size)), out_dir / f"mean.{ext}", fmt))
    return paths


# -- project ------------------------------------------------------------------
def run_project(cfg: RunConfig, embeddings_path, out_csv, png: Optional[str] = None):
    records = read_embeddings(embeddings_path)
    X = np.stack([r.vector for r in records]).astype(np.float64)
    e = cfg.eval
    proj = tsne(X, perplexity=e.perplexity, iterations=e.tsne_iterations, rng=cfg.seed,
                learning_rate=e.tsne_learning_rate)
    classes = list(cfg.probe.classes)
    labels = [None if r.label is None else (classes[r.label] if r.label < len(classes) else str(r.label))
              for r in records]
    export_projection(proj, [r.id for r in records], labels, out_csv, png_path=png)
    print(f"t-SNE final KL {proj.kl:.4f} over {len(records)} points", file=sys.stderr)
    return proj
