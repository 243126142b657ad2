"""Assembly of encoder, mapper and decoder into one report generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import decoder as dec
from .data import BOS, EOS, PAD, SEED_PROMPT, Example, Vocabulary
from .decoder import DecoderConfig, ForwardRecord, GenerationOutput, Spans
from .mapper import MapperConfig, init_mapper, map_patches, map_pooled
from .numcore import ShapeError, Tape, Tensor
from .refine import AggregationStrategy, GumbelConfig, aggregate, gumbel_softmax, reconstruct_embeddings, refine_loss
from .vision import EncoderConfig, encode, init_encoder, patchify, pool


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    mapper: MapperConfig = MapperConfig()
    decoder: DecoderConfig = DecoderConfig()

    def __post_init__(self):
        if self.mapper.d_v != self.encoder.d_v:
            raise ValueError(f"mapper input width {self.mapper.d_v} != encoder d_v {self.encoder.d_v}")
        if self.mapper.d_t != self.decoder.d_t:
            raise ValueError(f"mapper output width {self.mapper.d_t} != decoder d_t {self.decoder.d_t}")

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "mapper": asdict(self.mapper), "decoder": asdict(self.decoder)}

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        return cls(EncoderConfig(**raw["encoder"]), MapperConfig(**raw["mapper"]), DecoderConfig(**raw["decoder"]))


class ModelState:
    """All learnable tensors plus the configs and vocabulary that give them meaning."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        if len(vocab) > config.decoder.vocab_size:
            raise ValueError(f"vocabulary of {len(vocab)} exceeds decoder vocab_size {config.decoder.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.params = params
        self.prompt_ids = np.array(vocab.encode(SEED_PROMPT, specials=False), dtype=np.int64)
        frozen = config.encoder.freeze_encoder
        for name, p in params.items():
            p.requires_grad = not (frozen and name.startswith("enc."))

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> ModelState:
        rng = np.random.default_rng(seed)
        params = {}
        params.update(init_encoder(config.encoder, rng))
        params.update(init_mapper(config.mapper, rng))
        params.update(dec.init_decoder(config.decoder, rng))
        return cls(config, vocab, params)

    @property
    def embedding(self) -> Tensor:
        return self.params["dec.tok"]

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------------
    def encode_images(self, tape: Tape, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, H, W, C) images -> mapped patch tokens (B, k, d_t), mapped pooled vectors (B, d_t)."""
        cfg = self.config
        patches = patchify(np.asarray(images, dtype=np.float64), cfg.encoder.patch_size)
        pe = encode(tape, patches, self.params, cfg.encoder)
        tokens = map_patches(tape, pe, self.params, cfg.mapper)
        pooled = map_pooled(tape, pool(tape, pe), self.params, cfg.mapper)
        return tokens, pooled

    def spans(self, report_len: int) -> Spans:
        return Spans.build(self.config.encoder.num_patches, len(self.prompt_ids), report_len)

    def decode_inputs(self, tape: Tape, image_tokens: Tensor, report_in: np.ndarray) -> tuple[Tensor, Spans]:
        b, k, _ = image_tokens.shape
        n_prompt = len(self.prompt_ids)
        text_ids = np.concatenate([np.broadcast_to(self.prompt_ids, (b, n_prompt)), report_in], axis=1)
        text = dec.embed_tokens(tape, text_ids, self.embedding, self.params["dec.pos"], offset=k)
        spans = self.spans(report_in.shape[1])
        return tape.concat([image_tokens, text], axis=1), spans

    def forward(self, tape: Tape, images: np.ndarray, report_in: np.ndarray) -> ForwardRecord:
        tokens, pooled = self.encode_images(tape, images)
        inputs, spans = self.decode_inputs(tape, tokens, report_in)
        record = dec.forward(tape, inputs, self.params, self.config.decoder, spans)
        record.image_rep = pooled
        return record

    # ------------------------------------------------------------------
    def step_fn(self, image: np.ndarray):
        """Next-token log-probabilities for beam search, with the image encoded once."""
        tape = Tape(record=False)
        tokens, _ = self.encode_images(tape, image[None])

        def step(prefixes: list[list[int]]) -> np.ndarray:
            ids = np.asarray(prefixes, dtype=np.int64)
            n = ids.shape[0]
            t = Tape(record=False)
            img = t.constant(np.broadcast_to(tokens.data, (n, *tokens.shape[1:])))
            inputs, spans = self.decode_inputs(t, img, ids)
            record = dec.forward(t, inputs, self.params, self.config.decoder, spans)
            last = record.logits.data[:, -1, :]
            z = last - last.max(axis=-1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

        return step

    def max_report_len(self) -> int:
        return self.config.decoder.max_seq_len - self.config.encoder.num_patches - len(self.prompt_ids) - 1

    def generate(self, image: np.ndarray, beam_width: int = 3, max_len: int | None = None) -> GenerationOutput:
        limit = self.max_report_len() if max_len is None else min(max_len, self.max_report_len())
        out = dec.beam_search(self.step_fn(image), beam_width, limit)
        out.attn = self.attention_over(image, out.ids)
        return out

    def attention_over(self, image: np.ndarray, ids: Sequence[int]) -> np.ndarray:
        """Last-layer attention restricted to the generated span, (H, T, T)."""
        report_in = np.array([[BOS, *ids[:-1]]] if ids else [[BOS]], dtype=np.int64)
        record = self.forward(Tape(record=False), image[None], report_in)
        r0, r1 = record.spans.report
        return record.last_attn.data[0, :, r0:r1, r0:r1]


# ----------------------------------------------------------------------------
# batches and losses
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, C)
    report_in: np.ndarray  # (B, T) BOS w1 .. wn PAD..
    targets: np.ndarray  # (B, T) w1 .. wn EOS PAD..

    @property
    def lengths(self) -> np.ndarray:
        return (self.targets != PAD).sum(axis=1)


def make_batch(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    seqs = [vocab.encode(ex.report) for ex in examples]
    if any(s[-1] != EOS for s in seqs):
        raise ValueError("encoded reports must end in EOS")
    report_in = dec.pad_batch([s[:-1] for s in seqs])
    targets = dec.pad_batch([s[1:] for s in seqs])
    images = np.stack([ex.image for ex in examples])
    return Batch(images, report_in, targets)


@dataclass
class LossParts:
    report: Tensor
    refine: Tensor | None
    record: ForwardRecord


def compute_losses(
    tape: Tape,
    state: ModelState,
    batch: Batch,
    *,
    with_report: bool = True,
    with_refine: bool = True,
    gumbel: GumbelConfig = GumbelConfig(noise_enabled=False),
    strategy: AggregationStrategy = AggregationStrategy(),
    similarity: str = "dot",
    rng: np.random.Generator | None = None,
) -> LossParts:
    """Teacher-forced forward pass and the two objectives.

    With ``with_refine=False`` the refine head is never touched.
    """
    record = state.forward(tape, batch.images, batch.report_in)
    if record.logits.shape[:2] != batch.targets.shape:
        raise ShapeError("logit rows do not match targets")
    l_report = dec.report_loss(tape, record.logits, batch.targets) if with_report else None
    l_refine = None
    if with_refine:
        weights = gumbel_softmax(tape, record.logits, gumbel, rng=rng)
        recon = reconstruct_embeddings(tape, weights, state.embedding)
        h = aggregate(tape, recon, record.last_attn, strategy, batch.lengths, record.spans.report[0])
        l_refine = refine_loss(tape, h, record.image_rep, similarity)
    return LossParts(report=l_report, refine=l_refine, record=record)
