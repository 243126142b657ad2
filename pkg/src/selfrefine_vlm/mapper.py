"""Visual mapper: two-layer feed-forward projection from d_v into the word-embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError, Tape, Tensor, parameter


@dataclass(frozen=True)
class MapperConfig:
    d_v: int = 32
    d_t: int = 48
    hidden: int | None = None
    activation: str = "tanh"  # "identity" is for linearity checks

    def __post_init__(self):
        if self.d_v < 1 or self.d_t < 1:
            raise ValueError("mapper widths must be >= 1")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown mapper activation {self.activation!r}")

    @property
    def hidden_width(self) -> int:
        return self.hidden or self.d_t


def init_mapper(cfg: MapperConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    h = cfg.hidden_width
    return {
        "map.fc1.w": parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_v), (cfg.d_v, h))),
        "map.fc1.b": parameter(np.zeros(h)),
        "map.fc2.w": parameter(rng.normal(0.0, 1.0 / np.sqrt(h), (h, cfg.d_t))),
        "map.fc2.b": parameter(np.zeros(cfg.d_t)),
    }


def _apply(tape: Tape, x: Tensor, params: dict[str, Tensor], cfg: MapperConfig) -> Tensor:
    if x.shape[-1] != params["map.fc1.w"].shape[0]:
        raise ShapeError(f"mapper: input width {x.shape[-1]} vs weight {list(params['map.fc1.w'].shape)}")
    squeeze = x.ndim == 1
    if squeeze:
        x = tape.reshape(x, (1, x.shape[0]))
    h = tape.linear(x, params["map.fc1.w"], params["map.fc1.b"])
    if cfg.activation == "tanh":
        h = tape.tanh(h)
    out = tape.linear(h, params["map.fc2.w"], params["map.fc2.b"])
    if squeeze:
        out = tape.reshape(out, (out.shape[-1],))
    return out


def map_patches(tape: Tape, patch_embeddings: Tensor, params: dict[str, Tensor], cfg: MapperConfig) -> Tensor:
    """Row-wise projection of (..., k, d_v) patch embeddings to (..., k, d_t)."""
    return _apply(tape, patch_embeddings, params, cfg)


def map_pooled(tape: Tape, pooled: Tensor, params: dict[str, Tensor], cfg: MapperConfig) -> Tensor:
    """The same projection applied to pooled (..., d_v) vectors."""
    return _apply(tape, pooled, params, cfg)
