"""Decoder-only causal language model over [image tokens; prompt; report]."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BOS, EOS, PAD
from .layers import block, init_block
from .numcore import ShapeError, Tape, Tensor, parameter


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 64
    d_t: int = 48
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    max_seq_len: int = 64

    def __post_init__(self):
        if self.d_t % self.heads:
            raise ValueError(f"d_t={self.d_t} is not divisible by heads={self.heads}")
        if self.layers < 1 or self.vocab_size < 4:
            raise ValueError("decoder needs >= 1 layer and room for the reserved tokens")


@dataclass(frozen=True)
class Spans:
    """Half-open position ranges of the three input segments."""

    image: tuple[int, int]
    prompt: tuple[int, int]
    report: tuple[int, int]

    @classmethod
    def build(cls, n_image: int, n_prompt: int, n_report: int) -> Spans:
        a, b = n_image, n_image + n_prompt
        return cls((0, a), (a, b), (b, b + n_report))

    @property
    def total(self) -> int:
        return self.report[1]


@dataclass
class ForwardRecord:
    logits: Tensor  # (B, T, d), one row per report position
    last_attn: Tensor  # (B, H, L, L)
    spans: Spans
    image_rep: Tensor | None = None  # (B, d_t) mapped pooled image, filled by the model


@dataclass
class GenerationOutput:
    ids: list[int]
    score: float  # summed log-probability, <= 0
    attn: np.ndarray | None = field(default=None, repr=False)

    @property
    def normalized_score(self) -> float:
        return self.score / max(1, len(self.ids))


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {
        "dec.tok": parameter(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_t))),
        "dec.pos": parameter(rng.normal(0.0, 0.02, (cfg.max_seq_len, cfg.d_t))),
    }
    for i in range(cfg.layers):
        params.update(init_block(f"dec.block{i}", cfg.d_t, cfg.mlp_ratio, rng))
    params["dec.ln_f.g"] = parameter(np.ones(cfg.d_t))
    params["dec.ln_f.b"] = parameter(np.zeros(cfg.d_t))
    return params


def embed_tokens(tape: Tape, ids, table: Tensor, positions: Tensor | None = None, offset: int = 0) -> Tensor:
    """Rows of the embedding table plus the positional rows ``offset + i``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    x = tape.embedding(table, ids)
    if positions is None:
        return x
    n = ids.shape[-1]
    if offset + n > positions.shape[0]:
        raise ShapeError(f"sequence of {offset + n} positions exceeds table of {positions.shape[0]}")
    pos = tape.index(positions, slice(offset, offset + n))
    return x + tape.broadcast_to(pos, x.shape)


def forward(tape: Tape, inputs: Tensor, params: dict[str, Tensor], cfg: DecoderConfig, spans: Spans) -> ForwardRecord:
    """Run the causal stack on (B, L, d_t) input embeddings.

    Logits come out only for the report span, through the output head tied to
    the token embedding table.
    """
    if inputs.ndim != 3 or inputs.shape[-1] != cfg.d_t:
        raise ShapeError(f"decoder input {list(inputs.shape)} vs width {cfg.d_t}")
    length = inputs.shape[1]
    if length > cfg.max_seq_len:
        raise ShapeError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    if spans.total != length:
        raise ShapeError(f"span map covers {spans.total} positions, input has {length}")
    x = inputs
    attn = None
    for i in range(cfg.layers):
        x, attn = block(tape, x, params, f"dec.block{i}", cfg.heads, causal=True)
    r0, r1 = spans.report
    x = tape.index(x, (slice(None), slice(r0, r1)))
    x = tape.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"])
    logits = x @ tape.transpose(params["dec.tok"])
    return ForwardRecord(logits=logits, last_attn=attn, spans=spans)


def target_mask(targets: np.ndarray) -> np.ndarray:
    return np.asarray(targets) != PAD


def report_loss(tape: Tape, logits: Tensor, targets) -> Tensor:
    """Token cross-entropy averaged over non-PAD targets of each sample, then over samples."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = tape.reshape(logits, (1, *logits.shape))
        targets = targets[None, :]
    if logits.shape[:2] != targets.shape:
        raise ShapeError(f"report_loss: logits {list(logits.shape)} vs targets {list(targets.shape)}")
    mask = target_mask(targets)
    counts = mask.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        raise ValueError("report_loss: every target is PAD")
    onehot = np.zeros(logits.shape)
    b_idx, t_idx = np.nonzero(mask)
    onehot[b_idx, t_idx, targets[b_idx, t_idx]] = 1.0
    logp = tape.log_softmax(logits)
    per_sample = tape.sum(tape.sum(logp * onehot, axis=-1), axis=-1)
    weights = np.where(keep, 1.0 / np.maximum(counts, 1), 0.0) / keep.sum()
    return -tape.sum(per_sample * weights)


def beam_search(
    step_fn: Callable[[list[list[int]]], np.ndarray],
    beam_width: int,
    max_len: int,
    bos: int = BOS,
    eos: int = EOS,
) -> GenerationOutput:
    """Beam search ranked by length-normalised log-probability.

    ``step_fn`` maps prefixes (each starting with ``bos``) to next-token
    log-probabilities of shape (len(prefixes), vocab). Equal scores break
    toward the lower token id, then the lexicographically smaller sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live: list[tuple[float, list[int]]] = [(0.0, [bos])]
    done: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        logp = np.asarray(step_fn([seq for _, seq in live]), dtype=np.float64)
        cands = []
        for (score, seq), row in zip(live, logp):
            for tok, lp in enumerate(row):
                cands.append((score + lp, tok, seq + [tok]))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, tok, seq in cands[:beam_width]:
            (done if tok == eos else live).append((score, seq))
        if not live:
            break
    pool = done + live
    best_score, best_seq = min(pool, key=lambda c: (-c[0] / (len(c[1]) - 1), c[1]))
    return GenerationOutput(ids=best_seq[1:], score=float(best_score))


def greedy_decode(step_fn: Callable[[list[list[int]]], np.ndarray], max_len: int, bos: int = BOS, eos: int = EOS) -> GenerationOutput:
    seq, score = [bos], 0.0
    for _ in range(max_len):
        row = np.asarray(step_fn([seq]))[0]
        tok = int(np.argmax(row))
        seq.append(tok)
        score += float(row[tok])
        if tok == eos:
            break
    return GenerationOutput(ids=seq[1:], score=score)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
