"""Masked-autoencoder ViT: patching, random masking, encoder, decoder, loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Block, LayerNorm, Linear, Module, run_blocks
from .optim import AdamWState, TrainingError, adamw_step
from .tensor import Tensor


class GeometryError(ValueError):
    """Image/patch geometry is inconsistent."""


class UnsupportedConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    input_size: int = 224
    patch_size: int = 16
    encoder_dim: int = 384
    encoder_depth: int = 12
    encoder_heads: int = 6
    decoder_dim: int = 192
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    use_cls_token: bool = True
    channels: int = 3
    norm_pix_loss: bool = False
    loss_on_all_patches: bool = False

    PRESETS = {
        "vit-s16": {},
        "tiny": dict(input_size=64, patch_size=8, encoder_dim=64, encoder_depth=4, encoder_heads=4,
                     decoder_dim=32, decoder_depth=1, decoder_heads=4),
    }

    @classmethod
    def preset(cls, name: str, **overrides) -> "ViTConfig":
        if name not in cls.PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(cls.PRESETS)}")
        return cls(**{**cls.PRESETS[name], **overrides})

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    def validate(self) -> "ViTConfig":
        if self.patch_size <= 0 or self.input_size <= 0:
            raise GeometryError("input_size and patch_size must be positive")
        if self.input_size % self.patch_size:
            raise GeometryError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        for dim, heads, tag in ((self.encoder_dim, self.encoder_heads, "encoder"),
                                (self.decoder_dim, self.decoder_heads, "decoder")):
            if heads <= 0 or dim % heads:
                raise ValueError(f"{tag}_dim {dim} not divisible by {tag}_heads {heads}")
            if dim % 4:
                raise ValueError(f"{tag}_dim {dim} must be divisible by 4 for 2-D sin-cos positions")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder_depth and decoder_depth must be >= 1")
        mask_count(self.num_patches, self.mask_ratio)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)



# -- patches ------------------------------------------------------------------
@dataclass
class PatchGrid:
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int
    patches: np.ndarray  # [num_patches, patch_dim]

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


def patchify_array(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C]`` -> ``[..., N, p*p*C]`` with row-major patch order."""
    *lead, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise GeometryError(f"image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, C)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # [..., gh, gw, p, p, C]
    return x.reshape(*lead, gh * gw, patch_size * patch_size * C)


def unpatchify_array(patches: np.ndarray, grid_h: int, grid_w: int, patch_size: int, channels: int) -> np.ndarray:
    *lead, N, D = patches.shape
    if N != grid_h * grid_w or D != patch_size * patch_size * channels:
        raise GeometryError(f"patch array {patches.shape} inconsistent with grid {grid_h}x{grid_w}, "
                            f"patch {patch_size}, channels {channels}")
    nl = len(lead)
    x = patches.reshape(*lead, grid_h, grid_w, patch_size, patch_size, channels)
    x = np.moveaxis(x, nl + 1, nl + 2)  # [..., gh, p, gw, p, C]
    return x.reshape(*lead, grid_h * patch_size, grid_w * patch_size, channels)


def patchify(image: np.ndarray, patch_size: int, input_size: Optional[int] = None) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim != 3:
        raise GeometryError(f"expected H x W x C image, got shape {image.shape}")
    H, W, C = image.shape
    if H != W or (input_size is not None and H != input_size):
        raise GeometryError(f"image must be square of side {input_size or H}, got {H}x{W}")
    return PatchGrid(H // patch_size, W // patch_size, patch_size, C, patchify_array(image, patch_size))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return unpatchify_array(grid.patches, grid.grid_h, grid.grid_w, grid.patch_size, grid.channels)


# -- positions ----------------------------------------------------------------
def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin-cos table ``[grid_h*grid_w, dim]``.

    The first half of each row encodes the row coordinate, the second half
    the column coordinate; each half is ``[sin(pos*w_k), cos(pos*w_k)]`` with
    ``w_k = 10000^(-k/(dim/4))``.
    """
    if dim % 4:
        raise ValueError(f"positional dim must be divisible by 4, got {dim}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, rows.ravel()), _sincos_1d(dim // 2, cols.ravel())], axis=1)
    return emb.astype(np.float32)


# -- masking ------------------------------------------------------------------
def mask_count(num_patches: int, mask_ratio: float) -> int:
    """``round(mask_ratio * num_patches)`` with halves rounded away from zero."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    k = int(math.floor(mask_ratio * num_patches + 0.5))
    if k < 1 or k > num_patches - 1:
        raise ValueError(f"mask_ratio {mask_ratio} over {num_patches} patches leaves "
                         f"{k} masked; need at least one masked and one visible")
    return k


@dataclass
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: object = None

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.num_patches, dtype=bool)
        m[self.masked_idx] = True
        return m

    @classmethod
    def full_visibility(cls, num_patches: int) -> "MaskPlan":
        return cls(np.arange(num_patches), np.zeros(0, dtype=np.int64))


def random_mask(num_patches: int, mask_ratio: float, rng) -> MaskPlan:
    """Uniform choice of masked patches without replacement."""
    seed = rng if not isinstance(rng, np.random.Generator) else None
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k = mask_count(num_patches, mask_ratio)
    perm = gen.permutation(num_patches)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), seed)


def _stack_plans(plans: Sequence[MaskPlan]):
    vis = np.stack([np.asarray(p.visible_idx, dtype=np.int64) for p in plans])
    msk = np.stack([np.asarray(p.masked_idx, dtype=np.int64) for p in plans])
    return vis, msk


# -- model --------------------------------------------------------------------
class MaeModel(Module):
    def __init__(self, config: ViTConfig, seed: int = 0):
        config.validate()
        self._config = config
        rng = np.random.default_rng(seed)
        D, Dd, g = config.encoder_dim, config.decoder_dim, config.grid_size

        self.patch_embed = Linear(config.patch_dim, D, rng)
        self.cls_token = T.Tensor(rng.normal(0, 0.02, size=(1, D)).astype(np.float32), requires_grad=True) \
            if config.use_cls_token else None
        self.blocks = [Block(D, config.encoder_heads, config.mlp_ratio, rng) for _ in range(config.encoder_depth)]
        self.norm = LayerNorm(D)

        self.decoder_embed = Linear(D, Dd, rng)
        self.mask_token = T.Tensor(rng.normal(0, 0.02, size=(1, Dd)).astype(np.float32), requires_grad=True)
        self.decoder_blocks = [Block(Dd, config.decoder_heads, config.mlp_ratio, rng)
                               for _ in range(config.decoder_depth)]
        self.decoder_norm = LayerNorm(Dd)
        self.decoder_pred = Linear(Dd, config.patch_dim, rng)

        self._pos = sincos_pos_embed(g, g, D)
        self._dec_pos = sincos_pos_embed(g, g, Dd)

    @property
    def config(self) -> ViTConfig:
        return self._config

    @property
    def pos_embed(self) -> np.ndarray:
        return self._pos

    def encoder_parameters(self) -> list[tuple[str, Tensor]]:
        enc = ("patch_embed", "cls_token", "blocks", "norm")
        return [(n, p) for n, p in self.named_parameters() if n.split(".")[0] in enc]

    def astype(self, dtype) -> "MaeModel":
        super().astype(dtype)
        self._pos = self._pos.astype(dtype)
        self._dec_pos = self._dec_pos.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    # -- encoder --------------------------------------------------------
    def forward_encoder(self, patches: np.ndarray, visible_idx: np.ndarray, return_attn: bool = False):
        """Encode the visible patches of a batch.

        ``patches`` is ``[B, N, patch_dim]``; ``visible_idx`` is ``[B, V]`` and
        its per-row order is kept in the output.  Returns ``[B, V(+1), D]``.
        """
        B, N, _ = patches.shape
        visible_idx = np.asarray(visible_idx, dtype=np.int64)
        if visible_idx.size and (visible_idx.min() < 0 or visible_idx.max() >= N):
            raise IndexError(f"visible index out of range for {N} patches")
        rows = np.arange(B)[:, None]
        vis = patches[rows, visible_idx].astype(self.dtype, copy=False)
        x = self.patch_embed(Tensor(vis)) + self._pos[visible_idx]
        if self.cls_token is not None:
            cls = T.take(self.cls_token, np.zeros((B, 1), dtype=np.int64))
            x = T.concat([cls, x], axis=1)
        if return_attn:
            x, attn = run_blocks(self.blocks, x, return_last_attn=True)
            return self.norm(x), attn
        return self.norm(run_blocks(self.blocks, x))

    # -- decoder --------------------------------------------------------
    def assemble_decoder_tokens(self, latents: Tensor, visible_idx: np.ndarray, masked_idx: np.ndarray):
        """Project latents and place mask tokens at masked positions.

        Returns ``(cls_part or None, tokens[B, N, Dd])`` before positions are added.
        """
        visible_idx = np.asarray(visible_idx, dtype=np.int64)
        masked_idx = np.asarray(masked_idx, dtype=np.int64)
        B, V = visible_idx.shape
        has_cls = self.cls_token is not None
        if latents.shape[0] != B or latents.shape[1] != V + int(has_cls):
            raise ValueError(f"latents {latents.shape} do not match plan with {V} visible patches")
        y = self.decoder_embed(latents)
        cls_part = y[:, :1] if has_cls else None
        vis = y[:, 1:] if has_cls else y
        M = masked_idx.shape[1]
        mtok = T.take(self.mask_token, np.zeros((B, M), dtype=np.int64))
        seq = T.concat([vis, mtok], axis=1) if M else vis
        restore = np.argsort(np.concatenate([visible_idx, masked_idx], axis=1), axis=1, kind="stable")
        full = seq[np.arange(B)[:, None], restore]
        return cls_part, full

    def forward_decoder(self, latents: Tensor, visible_idx: np.ndarray, masked_idx: np.ndarray) -> Tensor:
        cls_part, full = self.assemble_decoder_tokens(latents, visible_idx, masked_idx)
        x = full + self._dec_pos
        if cls_part is not None:
            x = T.concat([cls_part, x], axis=1)
        x = self.decoder_norm(run_blocks(self.decoder_blocks, x))
        pred = self.decoder_pred(x)
        return pred[:, 1:] if cls_part is not None else pred

    # -- full objective -------------------------------------------------
    def loss(self, patches: np.ndarray, plans: Sequence[MaskPlan]) -> Tensor:
        vis, msk = _stack_plans(plans)
        latents = self.forward_encoder(patches, vis)
        pred = self.forward_decoder(latents, vis, msk)
        return patch_loss(pred, patches, msk, norm_pix=self._config.norm_pix_loss,
                          on_all=self._config.loss_on_all_patches)


def _normalize_target(target: np.ndarray) -> np.ndarray:
    t = target.astype(np.float64)
    mean = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True, ddof=1) if t.shape[-1] > 1 else np.zeros_like(mean)
    return (t - mean) / np.sqrt(var + 1e-6)


def patch_loss(pred: Tensor, target: np.ndarray, masked_idx: np.ndarray, norm_pix: bool = False,
               on_all: bool = False) -> Tensor:
    """Batched masked MSE; ``masked_idx`` is ``[B, M]`` (or ``[M]`` for one image)."""
    target = np.asarray(target)
    if norm_pix:
        target = _normalize_target(target)
    if on_all:
        return T.mse(pred, target)
    masked_idx = np.asarray(masked_idx, dtype=np.int64)
    if masked_idx.size == 0:
        raise ValueError("masked-patch loss needs at least one masked patch")
    lead = pred.shape[:-1]
    m = np.zeros(lead, dtype=bool)
    if masked_idx.ndim == 1:
        m[masked_idx] = True
    else:
        m[np.arange(lead[0])[:, None], masked_idx] = True
    return T.mse(pred, target, mask=m)


# -- single-image API -------------------------------------------------------------
def encode_visible(model: MaeModel, grid: PatchGrid, plan: MaskPlan) -> Tensor:
    """Encoder output ``[V(+1), D]`` for one image."""
    out = model.forward_encoder(grid.patches[None], np.asarray(plan.visible_idx)[None])
    return out[0]


def decode_full(model: MaeModel, latents: Tensor, plan: MaskPlan) -> Tensor:
    """Predicted pixels ``[num_patches, patch_dim]`` ordered by patch index."""
    lat = T.reshape(latents, (1,) + latents.shape)
    pred = model.forward_decoder(lat, np.asarray(plan.visible_idx)[None], np.asarray(plan.masked_idx)[None])
    return pred[0]


def mae_loss(pred, target, plan: MaskPlan, norm_pix: bool = False, on_all: bool = False) -> Tensor:
    """Reconstruction MSE over masked patches (all patches when ``on_all``)."""
    if isinstance(pred, PatchGrid):
        pred = Tensor(pred.patches)
    if isinstance(target, PatchGrid):
        target = target.patches
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    if pred.shape != np.shape(target):
        raise T.ShapeError(f"prediction {pred.shape} and target {np.shape(target)} differ")
    return patch_loss(pred, target, plan.masked_idx, norm_pix=norm_pix, on_all=on_all)


# -- training -----------------------------------------------------------------
def image_mask_rng(base_seed: int, step: int, index: int) -> np.random.Generator:
    """Counter-based RNG stream for one image's mask at one step."""
    return np.random.default_rng([base_seed, step, index])


def decay_mask(model: Module) -> list[bool]:
    return [p.ndim >= 2 for p in model.parameters()]


def pretrain_step(model: MaeModel, images: np.ndarray, step: int, base_seed: int, state: AdamWState,
                  lr: Optional[float] = None, indices: Optional[Sequence[int]] = None) -> float:
    """Fresh masks, forward, backward and one AdamW update; returns the batch loss.

    ``images`` is ``[B, H, W, C]`` in ``[0, 1]``.  ``indices`` identify the
    images inside the dataset for the mask RNG stream (defaults to 0..B-1).
    """
    cfg = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:3] != (cfg.input_size, cfg.input_size):
        raise GeometryError(f"batch shape {images.shape} does not match input_size {cfg.input_size}")
    patches = patchify_array(images.astype(model.dtype, copy=False), cfg.patch_size)
    indices = range(len(images)) if indices is None else indices
    plans = [random_mask(cfg.num_patches, cfg.mask_ratio, image_mask_rng(base_seed, step, int(i)))
             for i in indices]
    model.zero_grad()
    loss = model.loss(patches, plans)
    value = float(loss.data)
    eff_lr = state.lr if lr is None else lr
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} (lr={eff_lr:.3e})")
    loss.backward()
    params = model.parameters()
    adamw_step(params, [p.grad for p in params], state, lr=eff_lr, decay_mask=decay_mask(model))
    return value


# -- attention ------------------------------------------------------------------
@dataclass
class AttentionMaps:
    weights: np.ndarray   # [heads, tokens, tokens], final encoder block
    cls_maps: np.ndarray  # [heads, grid_h, grid_w]
    mean_map: np.ndarray  # [grid_h, grid_w]


def attention_maps(model: MaeModel, image: np.ndarray) -> AttentionMaps:
    """CLS-to-patch attention of the last encoder block on the unmasked image."""
    cfg = model.config
    if not cfg.use_cls_token:
        raise UnsupportedConfigError("attention maps need use_cls_token=True")
    grid = patchify(np.asarray(image, dtype=model.dtype), cfg.patch_size, cfg.input_size)
    with T.no_grad():
        _, attn = model.forward_encoder(grid.patches[None], np.arange(cfg.num_patches)[None], return_attn=True)
    w = attn.data[0]
    g = cfg.grid_size
    cls_maps = w[:, 0, 1:].reshape(-1, g, g)
    return AttentionMaps(weights=w, cls_maps=cls_maps, mean_map=cls_maps.mean(axis=0))
