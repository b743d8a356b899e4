"""Synthetic slide and ROI generators for tests and the demo pipeline.

None of this resembles real H&E tissue beyond having textured blobs on a
white background; it only exercises the machinery.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .corpus import CorpusManifest, ManifestRow, SlideImage


def noise_slide(height: int, width: int, rng, slide_id: str = "noise") -> SlideImage:
    gen = np.random.default_rng(rng)
    return SlideImage(gen.integers(0, 256, size=(height, width, 3), dtype=np.uint8), slide_id)


def blank_with_texture(height: int, width: int, texture_frac: float, rng, slide_id: str = "blank"):
    """White slide with one textured vertical band covering ``texture_frac`` of the width.

    Returns the slide and the band as ``(x0, y0, x1, y1)``.
    """
    gen = np.random.default_rng(rng)
    px = np.full((height, width, 3), 255, dtype=np.uint8)
    band = max(1, int(round(width * texture_frac)))
    x0 = (width - band) // 2
    px[:, x0:x0 + band] = gen.integers(0, 256, size=(height, band, 3), dtype=np.uint8)
    return SlideImage(px, slide_id), (x0, 0, x0 + band, height)


def _texture(h: int, w: int, params: dict, gen: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = gen.uniform(0, 2 * np.pi)
    ang = params["angle"] + gen.normal(0, 0.1)
    wave = np.sin(params["freq"] * (xx * np.cos(ang) + yy * np.sin(ang)) + phase)
    base = np.asarray(params["color"], dtype=np.float64)
    img = base[None, None, :] * (0.75 + 0.25 * wave[..., None])
    img += gen.normal(0, params.get("noise", 8.0), size=img.shape)
    return np.clip(img, 0, 255)


CLASS_TEXTURES = [
    dict(color=(220, 150, 190), freq=0.25, angle=0.0),
    dict(color=(130, 70, 160), freq=0.6, angle=1.2),
    dict(color=(180, 110, 120), freq=0.12, angle=2.3),
    dict(color=(90, 60, 130), freq=0.9, angle=0.6),
    dict(color=(200, 120, 160), freq=0.4, angle=1.9),
    dict(color=(150, 90, 110), freq=0.18, angle=0.3),
    dict(color=(110, 50, 100), freq=0.7, angle=2.8),
]


def tissue_slide(height: int, width: int, rng, slide_id: str = "slide", n_blobs: int = 12) -> SlideImage:
    """White background with textured elliptical blobs of the class textures."""
    gen = np.random.default_rng(rng)
    px = np.full((height, width, 3), 245.0)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(n_blobs):
        params = CLASS_TEXTURES[int(gen.integers(len(CLASS_TEXTURES)))]
        cy, cx = gen.uniform(0, height), gen.uniform(0, width)
        ry, rx = gen.uniform(0.08, 0.25) * height, gen.uniform(0.08, 0.25) * width
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        tex = _texture(height, width, params, gen)
        px[inside] = tex[inside]
    return SlideImage(px.astype(np.uint8), slide_id)


def labeled_rois(classes: Sequence[str], per_class: int, rng, min_side: int = 48,
                 max_side: int = 96) -> list[tuple[str, np.ndarray]]:
    """``(label, image)`` pairs; each class has its own colour/frequency/orientation."""
    gen = np.random.default_rng(rng)
    out = []
    for k, name in enumerate(classes):
        params = CLASS_TEXTURES[k % len(CLASS_TEXTURES)]
        for _ in range(per_class):
            h, w = (int(v) for v in gen.integers(min_side, max_side + 1, size=2))
            out.append((name, _texture(h, w, params, gen).astype(np.uint8)))
    return out


def write_slides(slides: Sequence[SlideImage], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in slides:
        p = out_dir / f"{s.slide_id}.png"
        Image.fromarray(s.pixels).save(p, format="PNG")
        paths.append(p)
    return paths


def write_labeled_manifest(rois: Sequence[tuple[str, np.ndarray]], out_dir,
                           name: str = "labeled.csv") -> CorpusManifest:
    out_dir = Path(out_dir)
    (out_dir / "rois").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (label, img) in enumerate(rois):
        rid = f"roi{i:06d}"
        rel = f"rois/{rid}.png"
        Image.fromarray(img).save(out_dir / rel, format="PNG")
        rows.append(ManifestRow(rid, rel, "synthetic", 0, 0, int(min(img.shape[:2])), float("nan"), label))
    m = CorpusManifest(rows, root=out_dir)
    m.write(out_dir / name)
    return m
