"""Random square-crop extraction from slide images and corpus manifests."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .vit import GeometryError

MANIFEST_HEADER = ["id", "path", "slide", "x", "y", "side", "cv", "label", "split"]
SPLITS = ("train", "val", "test")
LUMA = np.array([0.299, 0.587, 0.114])


class CorpusError(RuntimeError):
    pass


@dataclass
class SlideImage:
    pixels: np.ndarray  # [H, W, 3] uint8
    slide_id: str
    path: Optional[str] = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def load(cls, path, slide_id: Optional[str] = None) -> "SlideImage":
        path = Path(path)
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return cls(pixels, slide_id or path.stem, str(path))


@dataclass(frozen=True)
class SizeDistribution:
    mu: float = 256.0
    sigma: float = 64.0
    clamp_min: int = 64
    clamp_max: int = 512

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.clamp_min <= self.mu <= self.clamp_max:
            raise ValueError(f"need clamp_min <= mu <= clamp_max, got {self.clamp_min}, {self.mu}, {self.clamp_max}")


@dataclass(frozen=True)
class CropSpec:
    x: int
    y: int
    side: int
    slide_id: str
    seed: object = None
    cv: float = float("nan")


def fit_size_distribution(roi_sides: Sequence[float], patch_size: int = 16) -> SizeDistribution:
    """Normal fit (sample std) to annotated ROI side lengths, clamped to [max(2p, P1), P99]."""
    s = np.asarray(roi_sides, dtype=np.float64)
    if s.size < 2:
        raise ValueError("fit_size_distribution needs at least 2 samples")
    mu = float(s.mean())
    sigma = float(s.std(ddof=1))
    lo = int(math.ceil(max(2 * patch_size, np.percentile(s, 1))))
    hi = int(math.floor(np.percentile(s, 99)))
    lo = min(lo, int(math.floor(mu)))
    hi = max(hi, int(math.ceil(mu)), lo)
    return SizeDistribution(mu, sigma, lo, hi)


def read_roi_sizes(path) -> list[float]:
    """Single-column CSV of side lengths; a non-numeric first line is a header."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                out.append(float(row[0]))
            except ValueError:
                if i == 0:
                    continue
                raise
    return out


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def sample_crop(slide: SlideImage, dist: SizeDistribution, rng, max_redraws: int = 8) -> CropSpec:
    """Draw a side from N(mu, sigma) (redrawn up to 8 times, then clamped) and a uniform placement."""
    seed = rng if not isinstance(rng, np.random.Generator) else None
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    limit = min(slide.width, slide.height)
    if limit < dist.clamp_min:
        raise GeometryError(f"slide {slide.slide_id} ({slide.width}x{slide.height}) smaller than "
                            f"minimum crop side {dist.clamp_min}")
    side = gen.normal(dist.mu, dist.sigma)
    for _ in range(max_redraws):
        if dist.clamp_min <= side <= dist.clamp_max:
            break
        side = gen.normal(dist.mu, dist.sigma)
    side = min(max(_round_half_away(side), dist.clamp_min), dist.clamp_max, limit)
    x = int(gen.integers(0, slide.width - side + 1))
    y = int(gen.integers(0, slide.height - side + 1))
    return CropSpec(x, y, side, slide.slide_id, seed)


def crop_pixels(slide: SlideImage, crop: CropSpec) -> np.ndarray:
    return slide.pixels[crop.y:crop.y + crop.side, crop.x:crop.x + crop.side]


@dataclass(frozen=True)
class QualityResult:
    accepted: bool
    cv: float
    degenerate: bool = False


def luminance(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return p if p.ndim == 2 else p[..., :3] @ LUMA


def quality_check(pixels: np.ndarray, threshold: float = 0.1) -> QualityResult:
    """Coefficient of variation (std/mean) of Rec.601 luminance; accept iff cv > threshold.

    A zero-mean (all black) crop is rejected as degenerate with cv = inf.
    """
    lum = luminance(pixels)
    if lum.size == 0:
        raise GeometryError("quality_check on an empty crop")
    mean = lum.mean()
    if mean == 0.0:
        return QualityResult(False, math.inf, degenerate=True)
    std = math.sqrt(((lum - mean) ** 2).mean())
    cv = std / mean
    return QualityResult(cv > threshold, cv)


def resize_bilinear(image: np.ndarray, target_size) -> np.ndarray:
    """Bilinear resize with half-pixel centres to ``target_size`` (int or (h, w)).

    uint8 input gives rounded uint8 output; other dtypes give float64.
    """
    image = np.asarray(image)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else tuple(target_size)
    if th < 2 or tw < 2:
        raise GeometryError(f"resize target must be >= 2, got {th}x{tw}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise GeometryError(f"resize source must be >= 2x2, got {image.shape[:2]}")
    if image.shape[:2] == (th, tw):
        return image.copy()
    squeeze = image.ndim == 2
    src = np.ascontiguousarray((image[..., None] if squeeze else image), dtype=np.float64)
    out = kernels.resize_bilinear(src, int(th), int(tw))
    if squeeze:
        out = out[..., 0]
    if image.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out


# -- manifests ----------------------------------------------------------------
@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    slide: str
    x: int
    y: int
    side: int
    cv: float
    label: Optional[str] = None
    split: Optional[str] = None


def _fmt_cv(cv: float) -> str:
    return "" if cv is None or (isinstance(cv, float) and math.isnan(cv)) else repr(float(cv))


@dataclass
class CorpusManifest:
    rows: list
    root: Optional[Path] = None  # directory that relative paths resolve against
    attempts: int = 0
    unique_ids: bool = True

    def __post_init__(self):
        ids = [r.id for r in self.rows]
        if self.unique_ids and len(set(ids)) != len(ids):
            raise ValueError("manifest region ids are not unique")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def acceptance_rate(self) -> float:
        return len(self.rows) / self.attempts if self.attempts else float("nan")

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow([r.id, r.path, r.slide, r.x, r.y, r.side, _fmt_cv(r.cv), r.label or "", r.split or ""])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_csv().encode("utf-8"))
        return path

    @classmethod
    def read(cls, path, unique_ids: bool = True) -> "CorpusManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
            rows = []
            for line in reader:
                if not line:
                    continue
                if len(line) != len(MANIFEST_HEADER):
                    raise ValueError(f"{path}: malformed manifest row {line}")
                rid, p, slide, x, y, side, cv, label, split = line
                rows.append(ManifestRow(rid, p, slide, int(x or 0), int(y or 0), int(side or 0),
                                        float(cv) if cv else float("nan"), label or None, split or None))
        return cls(rows, root=path.parent, unique_ids=unique_ids)

    def load_image(self, row: ManifestRow) -> np.ndarray:
        with Image.open(self.resolve(row)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


# -- corpus generation ----------------------------------------------------------
_WORKER_SLIDES: list = []


def _init_worker(slides):
    global _WORKER_SLIDES
    _WORKER_SLIDES = slides


def _evaluate_candidate(slides, dist, threshold, seed, index):
    rng = np.random.default_rng([seed, index])
    slide_idx = int(rng.integers(len(slides)))
    crop = sample_crop(slides[slide_idx], dist, rng)
    q = quality_check(crop_pixels(slides[slide_idx], crop), threshold)
    return index, slide_idx, replace(crop, seed=(seed, index), cv=q.cv), q.accepted


def _evaluate_chunk(args):
    dist, threshold, seed, start, stop = args
    return [_evaluate_candidate(_WORKER_SLIDES, dist, threshold, seed, i) for i in range(start, stop)]


def generate_corpus(slides: Sequence[SlideImage], dist: SizeDistribution, count: int, threshold: float,
                    seed: int, out_dir, input_size: int = 224, workers: int = 1,
                    min_side: Optional[int] = None, chunk: int = 64,
                    manifest_name: str = "manifest.csv") -> CorpusManifest:
    """Sample candidates until ``count`` crops pass the quality filter.

    Candidate ``i`` draws from the RNG stream ``(seed, i)`` and accepted crops
    are taken in candidate order, so the manifest does not depend on
    ``workers``.  At most ``100 * count`` candidates are tried.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not slides:
        raise CorpusError("no slides given")
    if min_side is not None and dist.clamp_min < min_side:
        raise GeometryError(f"clamp_min {dist.clamp_min} below the model minimum crop side {min_side}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    budget = 100 * count

    def batches():
        for start in range(0, budget, chunk):
            yield dist, threshold, seed, start, min(budget, start + chunk)

    accepted: list[tuple[int, int, CropSpec]] = []
    attempts = 0
    if workers <= 1:
        _init_worker(list(slides))
        results = map(_evaluate_chunk, batches())
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(list(slides),))
        results = pool.map(_evaluate_chunk, batches())
    try:
        for chunk_result in results:
            for index, slide_idx, crop, ok in chunk_result:
                attempts += 1
                if ok:
                    accepted.append((index, slide_idx, crop))
                    if len(accepted) == count:
                        break
            if len(accepted) == count:
                break
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
        _init_worker([])
    if len(accepted) < count:
        rate = len(accepted) / max(1, attempts)
        raise CorpusError(f"rejection budget exhausted: {len(accepted)}/{count} accepted after "
                          f"{attempts} candidates (acceptance rate {rate:.4f})")

    rows = []
    for index, slide_idx, crop in accepted:
        rid = f"c{index:08d}"
        img = resize_bilinear(crop_pixels(slides[slide_idx], crop), input_size)
        rel = f"images/{rid}.png"
        Image.fromarray(img).save(out_dir / rel, format="PNG")
        rows.append(ManifestRow(rid, rel, crop.slide_id, crop.x, crop.y, crop.side, crop.cv))
    rows.sort(key=lambda r: r.id)
    manifest = CorpusManifest(rows, root=out_dir, attempts=attempts)
    manifest.write(out_dir / manifest_name)
    return manifest


def load_slides(slides_dir) -> list[SlideImage]:
    slides_dir = Path(slides_dir)
    if not slides_dir.is_dir():
        raise FileNotFoundError(f"slides directory does not exist: {slides_dir}")
    files = sorted(p for p in slides_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff"))
    if not files:
        raise FileNotFoundError(f"no slide images found in {slides_dir}")
    return [SlideImage.load(p) for p in files]


# -- splitting ----------------------------------------------------------------
def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``fractions``."""
    fr = [Fraction(f).limit_denominator(10 ** 6) for f in fractions]
    quotas = [n * f for f in fr]
    counts = [math.floor(q) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def stratified_split_labels(labels: Sequence, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                            rng=0, names: Sequence[str] = SPLITS) -> list[str]:
    """Split tag per item, with per-class largest-remainder proportions."""
    if len(fractions) != len(names):
        raise ValueError("one fraction per split name is required")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = list(labels)
    tags: list[Optional[str]] = [None] * len(labels)
    classes = sorted(set(labels), key=str)
    by_class = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    for c in classes:
        members = by_class[c]
        if len(members) < 3:
            raise ValueError(f"class {c!r} has {len(members)} members; stratified split needs >= 3")
        order = [members[i] for i in gen.permutation(len(members))]
        pos = 0
        for name, k in zip(names, split_counts(len(members), fractions)):
            for idx in order[pos:pos + k]:
                tags[idx] = name
            pos += k
    return tags  # type: ignore[return-value]


def stratified_split(rows: Sequence[ManifestRow], fractions: Sequence[float] = (0.7, 0.1, 0.2),
                     rng=0) -> list[ManifestRow]:
    if any(r.label is None for r in rows):
        raise ValueError("stratified_split needs a label on every row")
    tags = stratified_split_labels([r.label for r in rows], fractions, rng)
    return [replace(r, split=t) for r, t in zip(rows, tags)]
