"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np


def binary_search_perplexity(dist2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    n = dist2.shape[0]
    log_u = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.zeros(n)
    for i in range(n):
        d = np.delete(dist2[i], i)
        d = d - d.min()
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            p = np.exp(-d * beta)
            sum_p = p.sum()
            h = np.log(sum_p) + beta * (d * p).sum() / sum_p
            hdiff = h - log_u
            if abs(hdiff) <= tol:
                break
            if hdiff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        P[i, np.arange(n) != i] = p / sum_p
        betas[i] = beta
    return P, betas


def tsne_gradient(P: np.ndarray, Y: np.ndarray, exaggeration: float = 1.0):
    sq = (Y * Y).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T)
    num = 1.0 / (1.0 + np.maximum(dist, 0.0))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    off = ~np.eye(len(Y), dtype=bool)
    pos = (P > 0) & off
    kl = float((P[pos] * np.log(P[pos] / Q[pos])).sum())
    W = (exaggeration * P - Q) * num
    np.fill_diagonal(W, 0.0)
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return grad, kl


def resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = src.shape[:2]

    def coords(n_out, n_in):
        f = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.floor(f).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, f - i0

    y0, y1, wy = coords(out_h, in_h)
    x0, x1, wx = coords(out_w, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = (1 - wx) * src[y0][:, x0] + wx * src[y0][:, x1]
    bot = (1 - wx) * src[y1][:, x0] + wx * src[y1][:, x1]
    return (1 - wy) * top + wy * bot
