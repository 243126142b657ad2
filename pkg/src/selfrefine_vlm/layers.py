"""Pre-norm transformer block shared by the image encoder and the text decoder."""

from __future__ import annotations

import numpy as np

from .numcore import Tape, Tensor, parameter

MASK_VALUE = -1e30


def init_block(prefix: str, width: int, mlp_ratio: int, rng: np.random.Generator) -> dict[str, Tensor]:
    hidden = width * mlp_ratio
    std = 0.02
    return {
        f"{prefix}.ln1.g": parameter(np.ones(width)),
        f"{prefix}.ln1.b": parameter(np.zeros(width)),
        f"{prefix}.attn.qkv.w": parameter(rng.normal(0.0, std, (width, 3 * width))),
        f"{prefix}.attn.qkv.b": parameter(np.zeros(3 * width)),
        f"{prefix}.attn.out.w": parameter(rng.normal(0.0, std, (width, width))),
        f"{prefix}.attn.out.b": parameter(np.zeros(width)),
        f"{prefix}.ln2.g": parameter(np.ones(width)),
        f"{prefix}.ln2.b": parameter(np.zeros(width)),
        f"{prefix}.mlp.fc1.w": parameter(rng.normal(0.0, std, (width, hidden))),
        f"{prefix}.mlp.fc1.b": parameter(np.zeros(hidden)),
        f"{prefix}.mlp.fc2.w": parameter(rng.normal(0.0, std, (hidden, width))),
        f"{prefix}.mlp.fc2.b": parameter(np.zeros(width)),
    }


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal (future keys)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def attention(
    tape: Tape, x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, causal: bool
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention on (B, L, D); returns (output, weights (B, H, L, L))."""
    b, length, width = x.shape
    dh = width // heads
    qkv = tape.linear(x, params[f"{prefix}.attn.qkv.w"], params[f"{prefix}.attn.qkv.b"])
    qkv = tape.transpose(tape.reshape(qkv, (b, length, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tape.mul(q @ tape.transpose(k), 1.0 / np.sqrt(dh))
    if causal:
        scores = tape.masked_fill(scores, causal_mask(length), MASK_VALUE)
    weights = tape.softmax(scores)
    ctx = tape.reshape(tape.transpose(weights @ v, (0, 2, 1, 3)), (b, length, width))
    out = tape.linear(ctx, params[f"{prefix}.attn.out.w"], params[f"{prefix}.attn.out.b"])
    return out, weights


def block(
    tape: Tape, x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, causal: bool
) -> tuple[Tensor, Tensor]:
    h = tape.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    a, weights = attention(tape, h, params, prefix, heads, causal)
    x = x + a
    h = tape.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = tape.gelu(tape.linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"]))
    x = x + tape.linear(h, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
    return x, weights
