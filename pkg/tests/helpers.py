"""Small shared fixtures for the test-suite: toy vocabularies, models and batches."""

import numpy as np

from selfrefine_vlm.data import RESERVED, Vocabulary
from selfrefine_vlm.decoder import DecoderConfig
from selfrefine_vlm.mapper import MapperConfig
from selfrefine_vlm.model import Batch, ModelConfig, ModelState
from selfrefine_vlm.vision import EncoderConfig

# one "C<n> PASS|FAIL ..." line per acceptance criterion, printed in the pytest summary
ACCEPTANCE_LINES: list[str] = []

TOY_VOCAB = Vocabulary(list(RESERVED) + ["generate", "report", ":", "findings"])


def toy_config(d: int = 8, layers: int = 1, vocab_size: int = 8, activation: str = "tanh") -> ModelConfig:
    """vocab 8, d_v = d_t = 8, one encoder and one decoder layer, four 2x2 patches."""
    return ModelConfig(
        encoder=EncoderConfig(image_height=4, image_width=4, patch_size=2, d_v=d, layers=layers, heads=2),
        mapper=MapperConfig(d_v=d, d_t=d, activation=activation),
        decoder=DecoderConfig(vocab_size=vocab_size, d_t=d, layers=layers, heads=2, max_seq_len=16),
    )


def toy_state(seed: int = 0, jitter: float = 0.3, **kw) -> ModelState:
    """A toy model whose weights are spread out enough that attention and logits are far from uniform."""
    state = ModelState.init(toy_config(**kw), TOY_VOCAB, seed)
    rng = np.random.default_rng([seed, 99])
    for p in state.params.values():
        p.data += rng.normal(0.0, jitter, p.shape)
    return state


def toy_batch(seed: int = 0, report_len: int = 3, batch: int = 2, pad_last: bool = False) -> Batch:
    rng = np.random.default_rng([seed, 7])
    images = rng.random((batch, 4, 4, 1))
    words = rng.integers(4, 8, size=(batch, report_len))
    report_in = np.concatenate([np.full((batch, 1), 1), words[:, :-1]], axis=1)
    targets = np.concatenate([words[:, :-1], np.full((batch, 1), 2)], axis=1)
    if pad_last and batch > 1:
        report_in[-1, -1] = 0
        targets[-1, -1] = 0
        targets[-1, -2] = 2
    return Batch(images=images, report_in=report_in, targets=targets)
