"""Evaluation of trained models, the loss-weight and aggregation ablations, and the noise sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Example, parse_findings
from .metrics import CSV_HEADER, MetricReport, corpus_report
from .model import ModelConfig, ModelState
from .refine import AggregationStrategy
from .train import LossWeights, RefineSettings, TrainConfig, train_loop

log = logging.getLogger(__name__)

LAMBDA_GRID = (
    LossWeights(0.0, 1.0),
    LossWeights(0.3, 0.7),
    LossWeights(0.5, 0.5),
    LossWeights(0.7, 0.3),
    LossWeights(1.0, 0.0),
)
AGGREGATION_GRID = (
    AggregationStrategy("attention"),
    AggregationStrategy("mean"),
    AggregationStrategy("maxnorm"),
    AggregationStrategy("topk", 5),
)
NOISE_VARIANCES = (0.0, 0.1, 0.2, 0.3, 0.5)


@dataclass(frozen=True)
class NoiseSpec:
    variance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("noise variance must be nonnegative")


def add_gaussian_noise(image: np.ndarray, spec: NoiseSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pixel-wise N(0, variance) noise, clamped back into [0, 1]."""
    if spec.variance == 0:
        return np.array(image, dtype=np.float64)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    noisy = image + rng.normal(0.0, np.sqrt(spec.variance), size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


def noisy_copy(examples: Sequence[Example], spec: NoiseSpec) -> list[Example]:
    rng = np.random.default_rng(spec.seed)
    return [replace(ex, image=add_gaussian_noise(ex.image, spec, rng)) for ex in examples]


@dataclass
class Evaluation:
    metrics: MetricReport
    reports: list[str]
    scores: list[float]


def evaluate_model(state: ModelState, examples: Sequence[Example], beam_width: int = 3, max_len: int | None = None) -> Evaluation:
    vocab = state.vocab
    cands, refs, gen_f, true_f, texts, scores = [], [], [], [], [], []
    for ex in examples:
        out = state.generate(ex.image, beam_width, max_len)
        text = vocab.decode(out.ids)
        texts.append(text)
        scores.append(out.score)
        cands.append(vocab.encode(text, specials=False))
        refs.append(vocab.encode(ex.report, specials=False))
        gen_f.append(parse_findings(text))
        true_f.append(set(ex.findings))
    metrics = corpus_report(cands, refs, gen_f, true_f, state.embedding.data)
    return Evaluation(metrics, texts, scores)


def reference_metrics(state: ModelState, examples: Sequence[Example]) -> MetricReport:
    """Metrics with the ground-truth reports standing in as candidates."""
    vocab = state.vocab
    refs = [vocab.encode(ex.report, specials=False) for ex in examples]
    gen = [parse_findings(ex.report) for ex in examples]
    true = [set(ex.findings) for ex in examples]
    return corpus_report(refs, refs, gen, true, state.embedding.data)


def metrics_csv(rows: Sequence[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for label, report in rows:
        w.writerow(report.row(label))
    return buf.getvalue()


@dataclass
class Experiment:
    """Everything needed to train one model and score it on the test split."""

    model: ModelConfig
    train: TrainConfig
    refine: RefineSettings
    beam_width: int = 3
    max_len: int | None = None


def train_and_evaluate(
    exp: Experiment,
    vocab,
    train: Sequence[Example],
    val: Sequence[Example],
    test: Sequence[Example],
    weights: LossWeights,
    strategy: AggregationStrategy | None = None,
) -> tuple[ModelState, MetricReport]:
    refine = exp.refine if strategy is None else replace(exp.refine, strategy=strategy)
    state = ModelState.init(exp.model, vocab, exp.train.seed)
    train_loop(state, train, val, exp.train, weights, refine)
    ev = evaluate_model(state, test, exp.beam_width, exp.max_len)
    return state, ev.metrics


def run_lambda_ablation(
    exp: Experiment,
    vocab,
    train,
    val,
    test,
    grid: Sequence[LossWeights] = LAMBDA_GRID,
) -> tuple[list[tuple[str, MetricReport]], dict[LossWeights, ModelState]]:
    rows, models = [], {}
    for w in grid:
        state, report = train_and_evaluate(exp, vocab, train, val, test, w)
        log.info("%s -> %s", w.label, report)
        rows.append((w.label, report))
        models[w] = state
    return rows, models


def run_aggregation_ablation(
    exp: Experiment,
    vocab,
    train,
    val,
    test,
    strategies: Sequence[AggregationStrategy] = AGGREGATION_GRID,
    weights: LossWeights = LossWeights(0.3, 0.7),
) -> tuple[list[tuple[str, MetricReport]], dict[str, ModelState]]:
    kinds = {s.kind for s in strategies}
    if kinds != {"attention", "mean", "maxnorm", "topk"}:
        raise ValueError(f"aggregation ablation must cover all four strategies, got {sorted(kinds)}")
    rows, models = [], {}
    for s in strategies:
        state, report = train_and_evaluate(exp, vocab, train, val, test, weights, s)
        log.info("%s -> %s", s, report)
        rows.append((str(s), report))
        models[str(s)] = state
    return rows, models


def run_noise_sweep(
    models: dict[str, ModelState],
    examples: Sequence[Example],
    variances: Sequence[float] = NOISE_VARIANCES,
    seed: int = 0,
    beam_width: int = 3,
    max_len: int | None = None,
) -> list[tuple[str, float, MetricReport]]:
    """Score each model on noisy copies of ``examples``; rows are (model, variance, metrics)."""
    variances = list(variances)
    if variances != sorted(variances) or 0.0 not in variances:
        raise ValueError("variances must be ascending and include 0")
    rows = []
    for var in variances:
        noisy = noisy_copy(examples, NoiseSpec(var, seed))
        for name, state in models.items():
            rows.append((name, var, evaluate_model(state, noisy, beam_width, max_len).metrics))
    return rows


def noise_csv(rows: Sequence[tuple[str, float, MetricReport]]) -> str:
    return metrics_csv([(f"{name};variance={var:g}", m) for name, var, m in rows])
