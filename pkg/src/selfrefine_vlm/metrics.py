"""Corpus metrics: BLEU-1..4, ROUGE-L, embedding similarity and hallucination rate."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

METRIC_FIELDS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "emb_sim", "hallucination_rate")
CSV_HEADER = ("config",) + METRIC_FIELDS


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    emb_sim: float
    hallucination_rate: float
    n: int

    def __post_init__(self):
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self, config: str) -> list:
        return [config, *(repr(float(getattr(self, f))) for f in METRIC_FIELDS)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]], n: int) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and no smoothing."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for m in range(1, n + 1):
            c, r = _ngrams(cand, m), _ngrams(ref, m)
            matched[m - 1] += sum(min(cnt, r[g]) for g, cnt in c.items())
            total[m - 1] += max(0, len(cand) - m + 1)
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(a / b) for a, b in zip(matched, total)) / n
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return min(1.0, bp * math.exp(log_p))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable], beta: float = 1.0) -> float:
    if not reference:
        raise ValueError("ROUGE-L needs a nonempty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l_corpus(candidates, references, beta: float = 1.0) -> float:
    if len(candidates) != len(references) or not candidates:
        raise ValueError("ROUGE-L corpus needs equal, nonempty lists")
    return float(np.mean([rouge_l(c, r, beta) for c, r in zip(candidates, references)]))


def emb_sim(candidate: Sequence[int], reference: Sequence[int], table: np.ndarray) -> float:
    """Greedy-matching F1 of token cosine similarities (a BERTScore-style stand-in).

    ``table`` is a frozen embedding matrix indexed by token id.
    """
    if not candidate or not reference:
        raise ValueError("embedding similarity needs nonempty sequences")
    c = table[np.asarray(candidate)]
    r = table[np.asarray(reference)]
    c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    r = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    sim = c @ r.T
    precision = sim.max(axis=1).mean()
    recall = sim.max(axis=0).mean()
    if precision + recall <= 0:
        return 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return float(min(1.0, max(0.0, f1)))


def hallucination_rate(generated: set, true: set) -> float:
    return len(set(generated) - set(true)) / max(1, len(generated))


def corpus_report(
    candidates: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    generated_findings: Sequence[set],
    true_findings: Sequence[set],
    table: np.ndarray,
) -> MetricReport:
    """Every metric over one corpus of token-id sequences (specials already stripped).

    Hallucination rate is the mean of the per-report rates; an empty candidate
    scores zero embedding similarity.
    """
    bleus = [bleu_n(candidates, references, n) for n in (1, 2, 3, 4)]
    sims = [emb_sim(c, r, table) if c and r else 0.0 for c, r in zip(candidates, references)]
    hall = [hallucination_rate(g, t) for g, t in zip(generated_findings, true_findings)]
    return MetricReport(
        *bleus,
        rouge_l=rouge_l_corpus(candidates, references),
        emb_sim=float(np.mean(sims)),
        hallucination_rate=float(np.mean(hall)),
        n=len(candidates),
    )
