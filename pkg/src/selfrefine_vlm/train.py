"""Weighted two-objective training with AdamW and a linear-to-zero schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Example
from .model import Batch, ModelState, compute_losses, make_batch
from .numcore import DomainError, Tape, Tensor
from .refine import AggregationStrategy, GumbelConfig

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "split", "l_report", "l_refine", "l_total")


class NumericalFailure(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    report: float = 0.3
    refine: float = 0.7

    def __post_init__(self):
        if self.report < 0 or self.refine < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.report == 0 and self.refine == 0:
            raise ValueError("at least one loss weight must be positive")

    @property
    def label(self) -> str:
        return f"lambda_report={self.report:g};lambda_refine={self.refine:g}"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 15
    batch_size: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")


def total_loss(l_report, l_refine, weights: LossWeights):
    """lambda_report * L_report + lambda_refine * L_refine; zero-weighted terms are dropped."""
    terms = [(weights.report, l_report), (weights.refine, l_refine)]
    terms = [(w, v) for w, v in terms if w != 0]
    tape = next((v.tape for _, v in terms if isinstance(v, Tensor)), None)
    if tape is None:
        return float(sum(w * v for w, v in terms))
    out = None
    for w, v in terms:
        term = tape.mul(v, w)
        out = term if out is None else tape.add(out, term)
    return out


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """In-place AdamW update with decoupled decay and bias correction."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"adamw: gradient {list(g.shape)} vs parameter {list(p.shape)} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class LogRow:
    epoch: int
    split: str
    l_report: float
    l_refine: float
    l_total: float


def log_to_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.split, repr(r.l_report), repr(r.l_refine), repr(r.l_total)])
    return buf.getvalue()


@dataclass
class RefineSettings:
    gumbel: GumbelConfig = GumbelConfig()
    strategy: AggregationStrategy = AggregationStrategy()
    similarity: str = "dot"


@dataclass
class TrainResult:
    state: ModelState
    optimizer: AdamState
    log: list[LogRow]
    config: TrainConfig
    weights: LossWeights


def _batches(examples: Sequence[Example], size: int, order: Sequence[int]) -> list[list[Example]]:
    return [[examples[i] for i in order[j : j + size]] for j in range(0, len(order), size)]


def _losses(tape: Tape, state: ModelState, batch: Batch, weights: LossWeights, refine: RefineSettings, gumbel, rng):
    parts = compute_losses(
        tape,
        state,
        batch,
        with_report=True,
        with_refine=weights.refine > 0,
        gumbel=gumbel,
        strategy=refine.strategy,
        similarity=refine.similarity,
        rng=rng,
    )
    return parts.report, parts.refine, total_loss(parts.report, parts.refine, weights)


def evaluate_losses(
    state: ModelState,
    examples: Sequence[Example],
    weights: LossWeights,
    refine: RefineSettings,
    batch_size: int = 64,
) -> tuple[float, float, float]:
    """Sample-weighted mean losses with Gumbel noise off."""
    quiet = GumbelConfig(tau=refine.gumbel.tau, noise_enabled=False)
    sums = np.zeros(3)
    for chunk in _batches(examples, batch_size, range(len(examples))):
        tape = Tape(record=False)
        lr_, lf, lt = _losses(tape, state, make_batch(chunk, state.vocab), weights, refine, quiet, None)
        vals = [lr_.item(), 0.0 if lf is None else lf.item(), lt.item()]
        sums += np.array(vals) * len(chunk)
    return tuple(float(s) for s in sums / len(examples))


def train_loop(
    state: ModelState,
    train: Sequence[Example],
    val: Sequence[Example],
    config: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    refine: RefineSettings = RefineSettings(),
    on_epoch: Callable[[LogRow], None] | None = None,
) -> TrainResult:
    """Optimise ``state`` in place and return it with the per-epoch loss log.

    Epoch 0 rows are the losses of the initial model; later train rows average
    the minibatch losses seen during the epoch and val rows evaluate the model
    at the end of the epoch.
    """
    if not train:
        raise ValueError("training set is empty")
    opt = AdamState()
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    noise_rng = np.random.default_rng([config.seed, 1])
    trainable = state.trainable()
    rows: list[LogRow] = []

    def emit(row: LogRow):
        rows.append(row)
        if on_epoch:
            on_epoch(row)

    def check(values, step):
        if not all(math.isfinite(v) for v in values):
            raise NumericalFailure(step, f"losses {values}")

    def measure(examples, step):
        try:
            values = evaluate_losses(state, examples, weights, refine)
        except DomainError as exc:
            raise NumericalFailure(step, str(exc)) from exc
        check(values, step)
        return values

    emit(LogRow(0, "train", *measure(train, 0)))
    if val:
        emit(LogRow(0, "val", *measure(val, 0)))

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train))
        sums = np.zeros(3)
        for chunk in _batches(train, config.batch_size, order):
            tape = Tape()
            try:
                lr_, lf, lt = _losses(
                    tape, state, make_batch(chunk, state.vocab), weights, refine, refine.gumbel, noise_rng
                )
            except DomainError as exc:
                raise NumericalFailure(step, str(exc)) from exc
            vals = (lr_.item(), 0.0 if lf is None else lf.item(), lt.item())
            check(vals, step)
            state.zero_grad()
            tape.backward(lt)
            grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalFailure(step, f"non-finite gradient for {k}")
            lr = lr_at(step, total_steps, config.lr)
            adamw_step(
                {k: p.data for k, p in trainable.items()},
                grads,
                opt,
                lr,
                config.beta1,
                config.beta2,
                config.eps,
                config.weight_decay,
            )
            sums += np.array(vals) * len(chunk)
            step += 1
        emit(LogRow(epoch, "train", *(float(s) for s in sums / len(train))))
        if val:
            emit(LogRow(epoch, "val", *measure(val, step)))
        log.info("epoch %d/%d: %s", epoch, config.epochs, rows[-1])
    state.zero_grad()
    return TrainResult(state, opt, rows, config, weights)

