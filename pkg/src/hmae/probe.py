"""Frozen-encoder region embeddings and linear / one-hidden-layer MLP probes."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import resize_bilinear
from .metrics import confusion, f1_scores
from .nn import Linear, Module
from .optim import AdamWState, adamw_step
from .tensor import Tensor
from .vit import GeometryError, MaeModel, patchify_array

BRACS_CLASSES = ["Normal", "Benign", "UDH", "ADH", "FEA", "DCIS", "Invasive"]
COARSE_CLASSES = ["benign", "atypical", "malignant"]
BRACS_COARSE_MAP = {
    "Normal": "benign", "Benign": "benign", "UDH": "benign",
    "ADH": "atypical", "FEA": "atypical",
    "DCIS": "malignant", "Invasive": "malignant",
}


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    label: Optional[int] = None
    split: Optional[str] = None


@dataclass
class LabelMapping:
    classes: list
    coarse_map: Optional[dict] = None
    coarse_classes: Optional[list] = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if self.coarse_map is not None:
            missing = [c for c in self.classes if c not in self.coarse_map]
            if missing:
                raise ValueError(f"coarse map is not total; unmapped classes {missing}")
            if self.coarse_classes is None:
                seen: list = []
                for c in self.classes:
                    if self.coarse_map[c] not in seen:
                        seen.append(self.coarse_map[c])
                self.coarse_classes = seen

    @classmethod
    def bracs(cls) -> "LabelMapping":
        return cls(list(BRACS_CLASSES), dict(BRACS_COARSE_MAP), list(COARSE_CLASSES))

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValueError(f"unknown class label {name!r}; known: {self.classes}") from None


def coarsen_labels(records: Sequence[EmbeddingRecord], mapping: LabelMapping) -> tuple[list, LabelMapping]:
    """Replace fine labels by coarse ones; returns new records and the coarse mapping."""
    if mapping.coarse_map is None:
        raise ValueError("mapping has no coarse map")
    coarse = list(mapping.coarse_classes)
    out = []
    for r in records:
        if r.label is None:
            out.append(r)
            continue
        if not 0 <= r.label < len(mapping.classes):
            raise ValueError(f"record {r.id!r}: label {r.label} outside the fine class list")
        name = mapping.classes[r.label]
        if name not in mapping.coarse_map:
            raise ValueError(f"record {r.id!r}: label {name!r} has no coarse mapping")
        out.append(replace(r, label=coarse.index(mapping.coarse_map[name])))
    return out, LabelMapping(coarse)


# -- embedding ------------------------------------------------------------------
def tile_origins(length: int, tile: int) -> list[int]:
    """Non-overlapping tile starts; a remainder adds one tile flush with the far edge."""
    starts = list(range(0, length - tile + 1, tile))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def _to_unit_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def region_tiles(image: np.ndarray, input_size: int, patch_size: int, mode: str = "tile") -> np.ndarray:
    """Cut a region into ``[n_tiles, input_size, input_size, C]`` tiles in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    h, w = image.shape[:2]
    if min(h, w) < 2 * patch_size:
        raise GeometryError(f"region {h}x{w} is smaller than two patches ({2 * patch_size}px)")
    if mode == "resize":
        return _to_unit_float(resize_bilinear(image, input_size))[None]
    if mode != "tile":
        raise ValueError(f"unknown region mode {mode!r}")
    if min(h, w) < input_size:
        f = input_size / min(h, w)
        image = resize_bilinear(image, (max(input_size, round(h * f)), max(input_size, round(w * f))))
        h, w = image.shape[:2]
    img = _to_unit_float(image)
    tiles = [img[y:y + input_size, x:x + input_size]
             for y in tile_origins(h, input_size) for x in tile_origins(w, input_size)]
    return np.stack(tiles)


def embed_tiles(model: MaeModel, tiles: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Mean of all patch-token outputs (CLS excluded) over every tile, fully visible."""
    cfg = model.config
    total = np.zeros(cfg.encoder_dim, dtype=np.float64)
    count = 0
    vis_all = np.arange(cfg.num_patches)
    with T.no_grad():
        for start in range(0, len(tiles), batch_size):
            chunk = tiles[start:start + batch_size].astype(model.dtype, copy=False)
            patches = patchify_array(chunk, cfg.patch_size)
            vis = np.broadcast_to(vis_all, (len(chunk), cfg.num_patches))
            out = model.forward_encoder(patches, vis).data
            tokens = out[:, 1:] if cfg.use_cls_token else out
            total += tokens.reshape(-1, tokens.shape[-1]).sum(axis=0, dtype=np.float64)
            count += tokens.shape[0] * tokens.shape[1]
    return (total / count).astype(np.float32)


def embed_region(model: MaeModel, image: np.ndarray, mode: str = "tile") -> np.ndarray:
    cfg = model.config
    return embed_tiles(model, region_tiles(image, cfg.input_size, cfg.patch_size, mode))


# -- probes -------------------------------------------------------------------
@dataclass
class ProbeConfig:
    kind: str = "mlp"
    hidden_dim: int = 256
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0
    select_metric: str = "macro"
    standardize: bool = True

    def validate(self) -> "ProbeConfig":
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("mlp probe needs hidden_dim >= 1")
        if self.select_metric not in ("macro", "weighted"):
            raise ValueError(f"select_metric must be 'macro' or 'weighted', got {self.select_metric!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        return self


class Probe(Module):
    def __init__(self, in_dim: int, n_classes: int, config: ProbeConfig):
        config.validate()
        rng = np.random.default_rng(config.seed)
        self._config = config
        self._in_dim = in_dim
        self._n_classes = n_classes
        self._mean = np.zeros(in_dim, dtype=np.float32)
        self._scale = np.ones(in_dim, dtype=np.float32)
        if config.kind == "mlp":
            self.hidden = Linear(in_dim, config.hidden_dim, rng)
            self.out = Linear(config.hidden_dim, n_classes, rng)
        else:
            self.out = Linear(in_dim, n_classes, rng)

    @property
    def n_classes(self) -> int:
        return self._n_classes

    def fit_standardizer(self, X: np.ndarray) -> None:
        if self._config.standardize:
            self._mean = X.mean(axis=0).astype(np.float32)
            sd = X.std(axis=0)
            self._scale = np.where(sd > 1e-12, sd, 1.0).astype(np.float32)

    def logits(self, X: np.ndarray) -> Tensor:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self._in_dim:
            raise T.ShapeError(f"probe expects [n, {self._in_dim}] inputs, got {X.shape}")
        h = Tensor((X - self._mean) / self._scale)
        if self._config.kind == "mlp":
            h = T.gelu(self.hidden(h))
        return self.out(h)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = a.copy()


def predict(probe: Probe, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax class scores and argmax labels (ties go to the lowest index)."""
    with T.no_grad():
        probs = T.softmax(probe.logits(X), axis=-1).data.astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs, np.argmax(probs, axis=1)


def _score(probe: Probe, X, y, metric: str) -> float:
    _, pred = predict(probe, X)
    f1 = f1_scores(confusion(y, pred, probe.n_classes))
    return f1.macro if metric == "macro" else f1.weighted


def train_probe(X_train: np.ndarray, y_train, n_classes: int, config: ProbeConfig,
                X_val: Optional[np.ndarray] = None, y_val=None) -> Probe:
    """AdamW training on frozen features; keeps the best-validation-F1 epoch."""
    config.validate()
    X_train = np.asarray(X_train, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(np.unique(y_train)) < 2:
        raise ValueError("probe training needs at least two classes in the training split")
    probe = Probe(X_train.shape[1], n_classes, config)
    probe.fit_standardizer(X_train)
    params = probe.parameters()
    decay = [p.ndim >= 2 for p in params]
    state = AdamWState(lr=config.lr, beta1=0.9, beta2=0.999, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    have_val = X_val is not None and len(X_val) > 0
    best, best_state = -math.inf, probe.state()
    n = len(X_train)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            probe.zero_grad()
            loss = T.cross_entropy(probe.logits(X_train[idx]), y_train[idx])
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, decay_mask=decay)
        if have_val:
            score = _score(probe, X_val, y_val, config.select_metric)
            if score > best:
                best, best_state = score, probe.state()
    if have_val:
        probe.load_state(best_state)
    return probe


def records_to_arrays(records: Sequence[EmbeddingRecord], split: Optional[str] = None):
    rows = [r for r in records if split is None or r.split == split]
    if not rows:
        return np.zeros((0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    X = np.stack([r.vector for r in rows]).astype(np.float32)
    y = np.array([-1 if r.label is None else r.label for r in rows], dtype=np.int64)
    return X, y


def train_probe_records(records: Sequence[EmbeddingRecord], n_classes: int, config: ProbeConfig) -> Probe:
    Xtr, ytr = records_to_arrays(records, "train")
    Xva, yva = records_to_arrays(records, "val")
    return train_probe(Xtr, ytr, n_classes, config, Xva if len(Xva) else None, yva if len(yva) else None)
