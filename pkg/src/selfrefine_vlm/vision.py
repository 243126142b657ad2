"""Patch-based transformer image encoder and mean pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import block, init_block
from .numcore import ShapeError, Tape, Tensor, parameter


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 16
    image_width: int = 16
    channels: int = 1
    patch_size: int = 4
    d_v: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.d_v % self.heads:
            raise ValueError(f"d_v={self.d_v} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) image -> (..., k, P*P*C) patches, row-major over the patch grid."""
    *lead, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = img.reshape(*lead, h // p, p, w // p, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, height: int, width: int, channels: int, patch_size: int) -> np.ndarray:
    *lead, k, dim = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    if k != gh * gw or dim != p * p * channels:
        raise ValueError(f"{k} patches of length {dim} cannot tile a {height}x{width}x{channels} image")
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, channels)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {
        "enc.patch.w": parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), (cfg.patch_dim, cfg.d_v))),
        "enc.patch.b": parameter(np.zeros(cfg.d_v)),
        "enc.pos": parameter(rng.normal(0.0, 0.02, (cfg.num_patches, cfg.d_v))),
    }
    for i in range(cfg.layers):
        params.update(init_block(f"enc.block{i}", cfg.d_v, cfg.mlp_ratio, rng))
    params["enc.ln_f.g"] = parameter(np.ones(cfg.d_v))
    params["enc.ln_f.b"] = parameter(np.zeros(cfg.d_v))
    return params


def encode(tape: Tape, patches, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Contextual patch embeddings, (B, k, d_v) or (k, d_v) for a single image."""
    x = patches if isinstance(patches, Tensor) else tape.constant(patches)
    single = x.ndim == 2
    if single:
        x = tape.reshape(x, (1, *x.shape))
    if x.shape[-1] != cfg.patch_dim or x.shape[-2] != cfg.num_patches:
        raise ShapeError(
            f"encode: patches {list(x.shape[-2:])} vs config {[cfg.num_patches, cfg.patch_dim]}"
        )
    w = params["enc.patch.w"]
    if w.shape != (cfg.patch_dim, cfg.d_v):
        raise ShapeError(f"encode: patch projection {list(w.shape)} vs {[cfg.patch_dim, cfg.d_v]}")
    x = tape.linear(x, w, params["enc.patch.b"])
    x = x + tape.broadcast_to(params["enc.pos"], x.shape)
    for i in range(cfg.layers):
        x, _ = block(tape, x, params, f"enc.block{i}", cfg.heads, causal=False)
    x = tape.layer_norm(x, params["enc.ln_f.g"], params["enc.ln_f.b"])
    if single:
        x = tape.reshape(x, x.shape[1:])
    return x


def pool(tape: Tape, embeddings: Tensor) -> Tensor:
    """Global image representation: unweighted mean over the patch axis."""
    if embeddings.ndim < 2 or embeddings.shape[-2] == 0:
        raise ShapeError(f"pool: need at least one patch row, got shape {list(embeddings.shape)}")
    return tape.mean(embeddings, axis=-2)
