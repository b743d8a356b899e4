"""Exact t-SNE and projection export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels


@dataclass
class Projection2D:
    coords: np.ndarray  # [n, 2]
    perplexity: float
    iterations: int
    kl: float
    kl_history: dict  # iteration -> KL, with unexaggerated P


def pairwise_sq_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def joint_probabilities(X: np.ndarray, perplexity: float, tol: float = 1e-5) -> np.ndarray:
    """Symmetrised affinities ``P = (P_cond + P_cond^T) / (2n)``."""
    cond, _ = kernels.binary_search_perplexity(np.ascontiguousarray(pairwise_sq_distances(X)),
                                               float(perplexity), tol)
    P = (cond + cond.T) / (2.0 * len(cond))
    return P


def tsne(X, perplexity: float = 30.0, iterations: int = 1000, rng=0, learning_rate: float = 200.0,
         early_exaggeration: float = 12.0, exaggeration_iters: int = 250, momentum: float = 0.5,
         final_momentum: float = 0.8, min_gain: float = 0.01) -> Projection2D:
    """Exact t-SNE to 2-D.

    Bandwidths are calibrated per point by binary search, P is exaggerated for
    the first ``exaggeration_iters`` iterations, and updates use momentum with
    per-coordinate adaptive gains.  ``kl_history`` records the KL divergence
    (with the true P) at the end of exaggeration and at the last iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if perplexity <= 0 or n < 3 * perplexity or n - 1 < perplexity:
        raise ValueError(f"perplexity {perplexity} infeasible for {n} points (need n >= 3*perplexity)")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    P = np.ascontiguousarray(joint_probabilities(X, perplexity))
    Y = np.ascontiguousarray(gen.normal(0.0, 1e-4, size=(n, 2)))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = {}
    kl = float("nan")
    for it in range(iterations):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        mom = momentum if it < exaggeration_iters else final_momentum
        grad, kl_e = kernels.tsne_gradient(P, Y, exag)
        inc = np.sign(grad) != np.sign(update)
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        np.maximum(gains, min_gain, out=gains)
        update = mom * update - learning_rate * gains * grad
        Y = np.ascontiguousarray(Y + update)
        Y -= Y.mean(axis=0)
        if it + 1 == exaggeration_iters or it + 1 == iterations:
            _, kl = kernels.tsne_gradient(P, Y, 1.0)
            history[it + 1] = kl
    if iterations == 0:
        _, kl = kernels.tsne_gradient(P, Y, 1.0)
    return Projection2D(Y, float(perplexity), iterations, float(kl), history)


def export_projection(proj: Projection2D, ids: Sequence[str], labels: Sequence[Optional[str]], path,
                      png_path=None) -> Path:
    """CSV ``id,x,y,label`` (empty label for none) and optional PNG scatter."""
    if len(ids) != len(proj.coords) or len(labels) != len(proj.coords):
        raise ValueError("ids/labels must match the number of projected points")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label"])
        for rid, (x, y), lab in zip(ids, proj.coords, labels):
            w.writerow([rid, repr(float(x)), repr(float(y)), "" if lab is None else lab])
    if png_path is not None:
        render_scatter(proj.coords, labels, png_path)
    return path


PALETTE = [(228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
           (255, 127, 0), (166, 86, 40), (247, 129, 191), (90, 90, 90)]


def render_scatter(coords: np.ndarray, labels: Sequence[Optional[str]], path, size: int = 512) -> Path:
    """Rasterise points as 3x3 squares on white, colour by label (8-colour palette, cycling)."""
    from PIL import Image

    img = np.full((size, size, 3), 255, dtype=np.uint8)
    c = np.asarray(coords, dtype=np.float64)
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pix = np.round((c - lo) / span * (size - 9) + 4).astype(int)
    names = sorted({l for l in labels if l is not None}, key=str)
    colour = {name: PALETTE[i % len(PALETTE)] for i, name in enumerate(names)}
    for (px, py), lab in zip(pix, labels):
        col = colour.get(lab, (0, 0, 0))
        img[size - 1 - py - 1:size - 1 - py + 2, px - 1:px + 2] = col
    path = Path(path)
    Image.fromarray(img).save(path, format="PNG")
    return path
