"""Synthetic image/report corpus, vocabulary and JSONL persistence.

Images are dark squares with bright shapes in some quadrants; the report is a
fixed template listing those shapes, so every clause of a generated report can
be checked against the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FINDING_TYPES = ("disk", "bar-horizontal", "bar-vertical")
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")
TYPE_PHRASES = {"disk": "disk", "bar-horizontal": "horizontal bar", "bar-vertical": "vertical bar"}
EMPTY_REPORT = "findings : no acute abnormality ."
SEED_PROMPT = "generate report :"

BACKGROUND = 0.1
FOREGROUND = 0.9

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

Finding = tuple[str, str]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_examples: int = 720
    height: int = 16
    width: int = 16
    channels: int = 1
    max_findings: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        if self.height % 2 or self.width % 2:
            raise ValueError("image sides must be even to form quadrants")
        if not 0 <= self.max_findings <= len(QUADRANTS):
            raise ValueError(f"max_findings must be in [0, {len(QUADRANTS)}]")

    @classmethod
    def from_dict(cls, raw: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise KeyError(f"unknown synthetic spec key: {unknown[0]}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    image: np.ndarray  # (H, W, C) in [0, 1]
    report: str
    findings: frozenset[Finding]

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (
            self.report == other.report
            and self.findings == other.findings
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


# ----------------------------------------------------------------------------
# report grammar
# ----------------------------------------------------------------------------


def clause(finding: Finding) -> str:
    kind, quadrant = finding
    return f"{TYPE_PHRASES[kind]} in {quadrant.replace('-', ' ')} quadrant ."


_CLAUSE_LOOKUP = {
    tuple(clause((k, q)).split()[:-1]): (k, q) for k in FINDING_TYPES for q in QUADRANTS
}


def render_report(findings: Iterable[Finding]) -> str:
    clauses = sorted(clause(f) for f in findings)
    if not clauses:
        return EMPTY_REPORT
    return "findings : " + " ".join(clauses)


def parse_findings(report: str) -> set[Finding]:
    """Finding set named by a report; clauses outside the grammar are ignored."""
    words = report.split()
    if words[:2] == ["findings", ":"]:
        words = words[2:]
    found = set()
    current: list[str] = []
    for w in words + ["."]:
        if w == ".":
            hit = _CLAUSE_LOOKUP.get(tuple(current))
            if hit is not None:
                found.add(hit)
            current = []
        else:
            current.append(w)
    return found


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def _shape_mask(kind: str, qh: int, qw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:qh, 0:qw]
    cy, cx = (qh - 1) / 2.0, (qw - 1) / 2.0
    if kind == "disk":
        r = 0.35 * min(qh, qw)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    half_t = max(1, min(qh, qw) // 4) / 2.0
    half_l = 0.75 * min(qh, qw) / 2.0
    if kind == "bar-horizontal":
        return (np.abs(yy - cy) < half_t) & (np.abs(xx - cx) < half_l)
    if kind == "bar-vertical":
        return (np.abs(xx - cx) < half_t) & (np.abs(yy - cy) < half_l)
    raise ValueError(f"unknown finding type {kind!r}")


def render_image(findings: Iterable[Finding], height: int, width: int, channels: int = 1) -> np.ndarray:
    qh, qw = height // 2, width // 2
    img = np.full((height, width, channels), BACKGROUND)
    for kind, quadrant in findings:
        row = 0 if quadrant.startswith("upper") else qh
        col = 0 if quadrant.endswith("left") else qw
        mask = _shape_mask(kind, qh, qw)
        img[row : row + qh, col : col + qw][mask] = FOREGROUND
    return img


def generate_corpus(spec: SyntheticSpec) -> list[Example]:
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for _ in range(spec.n_examples):
        count = int(rng.integers(0, spec.max_findings + 1))
        quads = rng.choice(len(QUADRANTS), size=count, replace=False)
        kinds = rng.integers(0, len(FINDING_TYPES), size=count)
        findings = frozenset((FINDING_TYPES[k], QUADRANTS[q]) for k, q in zip(kinds, quads))
        corpus.append(
            Example(
                image=render_image(findings, spec.height, spec.width, spec.channels),
                report=render_report(findings),
                findings=findings,
            )
        )
    return corpus


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_dict(cls, raw: dict) -> Split:
        return cls(list(raw["train"]), list(raw["val"]), list(raw["test"]))


def make_split(
    n: int,
    seed: int,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    counts: Sequence[int] | None = None,
) -> Split:
    """Shuffle ``range(n)`` and cut it into train/val/test.

    ``counts`` pins exact sizes (they must sum to ``n``); otherwise sizes come
    from ``ratios`` with the remainder going to train.
    """
    if counts is None:
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        counts = (n - n_val - n_test, n_val, n_test)
    if sum(counts) != n or min(counts) < 0:
        raise ValueError(f"split counts {list(counts)} do not cover {n} examples")
    order = np.random.default_rng(seed).permutation(n).tolist()
    a, b = counts[0], counts[0] + counts[1]
    return Split(sorted(order[:a]), sorted(order[a:b]), sorted(order[b:]))


# ----------------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------------


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str, specials: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK) for w in text.split()]
        return [BOS, *ids, EOS] if specials else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK])
        return " ".join(words)

    def words(self, ids: Iterable[int]) -> list[str]:
        return self.decode(ids).split()


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    """Reserved ids, then whitespace tokens in order of first appearance."""
    tokens = list(RESERVED)
    seen = set(tokens)
    any_text = False
    for text in texts:
        any_text = True
        for w in text.split():
            if w not in seen:
                seen.add(w)
                tokens.append(w)
    if not any_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tokens)


def corpus_vocab(corpus: Sequence[Example]) -> Vocabulary:
    """Vocabulary over the seed prompt plus every report."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return build_vocab([SEED_PROMPT, *(ex.report for ex in corpus)])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.decode(ids)


# ----------------------------------------------------------------------------
# JSONL I/O
# ----------------------------------------------------------------------------


def example_to_json(ex: Example) -> str:
    img = ex.image[:, :, 0] if ex.image.shape[2] == 1 else ex.image
    obj = {
        "image": img.tolist(),
        "report": ex.report,
        "findings": sorted([list(f) for f in ex.findings]),
    }
    return json.dumps(obj, separators=(",", ":"))


def save_corpus(corpus: Sequence[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(example_to_json(ex))
            fh.write("\n")


def _parse_line(line: str, lineno: int, expect: tuple[int, ...] | None) -> Example:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or not {"image", "report", "findings"} <= set(obj):
        raise CorpusError(f"line {lineno}: expected keys image, report, findings")
    rows = obj["image"]
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        raise CorpusError(f"line {lineno}: image must be a nested list of rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise CorpusError(f"line {lineno}: ragged image rows (widths {sorted(widths)})")
    try:
        img = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise CorpusError(f"line {lineno}: image entries must be numbers") from None
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise CorpusError(f"line {lineno}: image must be HxW or HxWxC")
    if expect is not None and img.shape != expect:
        raise CorpusError(
            f"line {lineno}: image shape {list(img.shape)} differs from {list(expect)} on line 1"
        )
    if not np.all(np.isfinite(img)):
        raise CorpusError(f"line {lineno}: non-finite pixel")
    try:
        findings = frozenset((str(k), str(q)) for k, q in obj["findings"])
    except (TypeError, ValueError):
        raise CorpusError(f"line {lineno}: findings must be [type, quadrant] pairs") from None
    if not isinstance(obj["report"], str):
        raise CorpusError(f"line {lineno}: report must be a string")
    return Example(image=img, report=obj["report"], findings=findings)


def load_corpus(path: str | Path) -> list[Example]:
    corpus: list[Example] = []
    expect = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            ex = _parse_line(line, lineno, expect)
            expect = ex.image.shape
            corpus.append(ex)
    if not corpus:
        raise CorpusError(f"{path}: corpus file has no examples")
    return corpus


def save_split(split: Split, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_dict()) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> Split:
    try:
        return Split.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorpusError(f"{path}: malformed split file ({exc})") from None
