"""Self-refining head.

Gumbel-Softmax turns each report position's logits into a near one-hot weight
row, the rows select embeddings out of the (tied) token table, an aggregation
collapses the report into one vector ``h``, and the loss pulls ``h`` toward the
mapped pooled image vector through ``exp(-similarity)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError, Tape, Tensor

AGGREGATIONS = ("attention", "mean", "maxnorm", "topk")


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 0.5
    noise_enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"Gumbel temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str = "attention"
    k: int = 5

    def __post_init__(self):
        if self.kind not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.kind!r}; choose from {AGGREGATIONS}")
        if self.k < 1:
            raise ValueError("top-k needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> AggregationStrategy:
        """``attention``, ``mean``, ``maxnorm``, ``topk`` or ``topk:<k>``."""
        kind, _, k = text.partition(":")
        return cls(kind, int(k)) if k else cls(kind)

    def __str__(self) -> str:
        return f"topk:{self.k}" if self.kind == "topk" else self.kind


def sample_gumbel(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(
    tape: Tape,
    logits: Tensor,
    cfg: GumbelConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """softmax((log_softmax(logits) + g) / tau) over the vocabulary axis.

    ``g`` is ``noise`` if given, fresh Gumbel draws from ``rng`` when noise is
    enabled, and zero otherwise.  It never receives a gradient.
    """
    if not cfg.tau > 0:
        raise ValueError(f"Gumbel temperature must be positive, got {cfg.tau}")
    z = tape.log_softmax(logits)
    if noise is None and cfg.noise_enabled:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        noise = sample_gumbel(logits.shape, rng)
    if noise is not None:
        if noise.shape != logits.shape:
            raise ShapeError(f"gumbel noise {list(noise.shape)} vs logits {list(logits.shape)}")
        z = z + noise
    return tape.softmax(tape.mul(z, 1.0 / cfg.tau))


def reconstruct_embeddings(tape: Tape, weights: Tensor, table: Tensor) -> Tensor:
    """Weighted sums of embedding rows: (..., T, d) @ (d, d_t)."""
    if weights.shape[-1] != table.shape[0]:
        raise ShapeError(f"reconstruct: weights {list(weights.shape)} vs table {list(table.shape)}")
    return weights @ table


def attention_token_weights(attn: np.ndarray, start: int, lengths: np.ndarray) -> np.ndarray:
    """Data-only version of the attention weights, used to rank tokens for top-k."""
    b = attn.shape[0]
    out = np.zeros((b, int(lengths.max())))
    for i in range(b):
        n = int(lengths[i])
        sub = attn[i, :, start : start + n, start : start + n].mean(axis=0)
        col = sub.mean(axis=0)
        out[i, :n] = col / col.sum()
    return out


def aggregate(
    tape: Tape,
    embeds: Tensor,
    attn: Tensor,
    strategy: AggregationStrategy,
    lengths=None,
    start: int = 0,
) -> Tensor:
    """Collapse (B, T, d_t) token embeddings into (B, d_t).

    ``attn`` is last-layer attention (B, H, L, L); the report span occupies
    positions ``start .. start + T`` and sample ``i`` uses its first
    ``lengths[i]`` tokens.  Unbatched inputs ((T, d_t) and (H, L, L)) are
    accepted and return a (d_t,) vector.
    """
    single = embeds.ndim == 2
    if single:
        embeds = tape.reshape(embeds, (1, *embeds.shape))
        attn = tape.reshape(attn, (1, *attn.shape))
    b, t, d = embeds.shape
    lengths = np.full(b, t) if lengths is None else np.asarray(lengths, dtype=np.int64).reshape(b)
    if t == 0 or lengths.min() < 1:
        raise ValueError("aggregate: empty report span")
    if lengths.max() > t or start + t > attn.shape[-1]:
        raise ShapeError(f"aggregate: span [{start}, {start + t}) outside attention {list(attn.shape)}")
    valid = np.arange(t)[None, :] < lengths[:, None]  # (B, T)

    if strategy.kind == "attention":
        heads = attn.shape[1]
        sub = tape.index(attn, (slice(None), slice(None), slice(start, start + t), slice(start, start + t)))
        per_pair = tape.mul(tape.sum(sub, axis=1), 1.0 / heads)  # (B, Tq, Tk)
        qmask = valid[:, :, None] * valid[:, None, :] / lengths[:, None, None]
        col = tape.sum(per_pair * qmask, axis=1)  # (B, Tk)
        total = tape.sum(col, axis=1, keepdims=True)
        w = col / tape.broadcast_to(total, col.shape)
        out = tape.reshape(tape.reshape(w, (b, 1, t)) @ embeds, (b, d))
    elif strategy.kind == "mean":
        w = valid / lengths[:, None]
        out = tape.reshape(tape.constant(w.reshape(b, 1, t)) @ embeds, (b, d))
    else:
        if strategy.kind == "maxnorm":
            norms = np.linalg.norm(embeds.data, axis=-1)
            norms = np.where(valid, norms, -np.inf)
            picks = [np.array([int(np.argmax(norms[i]))]) for i in range(b)]
        else:
            scores = attention_token_weights(attn.data, start, lengths)
            picks = []
            for i in range(b):
                n = int(lengths[i])
                kk = min(strategy.k, n)
                order = np.lexsort((np.arange(n), -scores[i, :n]))
                picks.append(np.sort(order[:kk]))
        w = np.zeros((b, 1, t))
        for i, idx in enumerate(picks):
            w[i, 0, idx] = 1.0 / len(idx)
        out = tape.reshape(tape.constant(w) @ embeds, (b, d))
    if single:
        out = tape.reshape(out, (d,))
    return out


def refine_loss(tape: Tape, text_rep: Tensor, image_rep: Tensor, mode: str = "dot") -> Tensor:
    """mean_i exp(-sim(h_i, e_i)); ``dot`` uses the raw inner product, ``cosine`` normalises first."""
    if text_rep.shape != image_rep.shape:
        raise ShapeError(f"refine_loss: text {list(text_rep.shape)} vs image {list(image_rep.shape)}")
    if text_rep.ndim == 1:
        text_rep = tape.reshape(text_rep, (1, text_rep.shape[0]))
        image_rep = tape.reshape(image_rep, (1, image_rep.shape[0]))
    sim = tape.sum(text_rep * image_rep, axis=-1)
    if mode == "cosine":
        nh = tape.sqrt(tape.sum(text_rep * text_rep, axis=-1))
        ne = tape.sqrt(tape.sum(image_rep * image_rep, axis=-1))
        sim = sim / (nh * ne)
    elif mode != "dot":
        raise ValueError(f"unknown similarity mode {mode!r}")
    return tape.mean(tape.exp(-sim))
