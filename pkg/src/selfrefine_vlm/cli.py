"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data or checkpoint
corruption, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt_io
from .ablation import (
    AGGREGATION_GRID,
    LAMBDA_GRID,
    Experiment,
    evaluate_model,
    metrics_csv,
    noise_csv,
    reference_metrics,
    run_aggregation_ablation,
    run_lambda_ablation,
    run_noise_sweep,
)
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, refine_to_dict
from .data import (
    CorpusError,
    Example,
    Split,
    SyntheticSpec,
    corpus_vocab,
    generate_corpus,
    load_corpus,
    load_split,
    make_split,
    save_corpus,
    save_split,
)
from .decoder import greedy_decode
from .model import ModelState
from .train import AdamState, NumericalFailure, log_to_csv, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("selfrefine_vlm")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: RunConfig) -> tuple[list[Example], Split]:
    data = cfg.raw["data"]
    if data["corpus"]:
        corpus = load_corpus(data["corpus"])
    else:
        corpus = generate_corpus(cfg.synthetic_spec())
    if data["split"]:
        split = load_split(data["split"])
        if max(split.train + split.val + split.test, default=-1) >= len(corpus):
            raise CorpusError(f"split file {data['split']} indexes past the corpus")
    else:
        split = make_split(len(corpus), cfg.synthetic_spec().seed, counts=cfg.split_counts)
    return corpus, split


def _parts(corpus: list[Example], split: Split):
    pick = lambda idx: [corpus[i] for i in idx]  # noqa: E731
    return pick(split.train), pick(split.val), pick(split.test)


def _experiment(cfg: RunConfig) -> Experiment:
    _, beam, max_len = cfg.eval_settings()
    return Experiment(cfg.model_config(), cfg.train_config(), cfg.refine_settings(), beam, max_len)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise UsageError(f"spec file not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"spec file is not valid JSON: {exc}") from None
    counts = raw.pop("split_counts", None)
    try:
        spec = SyntheticSpec.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(exc.args[0]) from None
    corpus = generate_corpus(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    try:
        split = make_split(len(corpus), spec.seed, counts=counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split_path = out.with_name(out.stem + ".split.json")
    save_split(split, split_path)
    print(f"wrote {len(corpus)} examples to {out} and split to {split_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    out = _out_dir(args.out)
    cfg.write(out)
    corpus, split = _load_data(cfg)
    train, val, _ = _parts(corpus, split)
    vocab = corpus_vocab(corpus)
    state = ModelState.init(cfg.model_config(), vocab, cfg.seed)
    refine = cfg.refine_settings()
    result = train_loop(state, train, val, cfg.train_config(), cfg.loss_weights(), refine)
    (out / "losses.csv").write_text(log_to_csv(result.log))
    meta = {"resolved_config": cfg.raw, "refine": refine_to_dict(refine)}
    ckpt_io.save(Checkpoint(state, result.optimizer, meta), out / "model.ckpt")
    print(f"trained {cfg.train_config().epochs} epochs; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    state = ckpt_io.load(args.checkpoint).state
    examples = load_corpus(args.input)
    rows = []
    for ex in examples:
        if args.beam == 1 and args.greedy:
            out = greedy_decode(state.step_fn(ex.image), state.max_report_len())
        else:
            out = state.generate(ex.image, args.beam)
        rows.append({"report": state.vocab.decode(out.ids), "score": out.score})
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out_path, rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = ckpt_io.load(args.checkpoint).state
    examples = load_corpus(args.data)
    out = _out_dir(args.out)
    if args.reference:
        metrics = reference_metrics(state, examples)
    else:
        metrics = evaluate_model(state, examples, args.beam, args.max_len).metrics
    (out / "metrics.json").write_text(metrics.to_json() + "\n")
    (out / "metrics.csv").write_text(metrics_csv([("reference" if args.reference else "model", metrics)]))
    print(metrics.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    out = _out_dir(args.out)
    cfg.write(out)
    corpus, split = _load_data(cfg)
    train, val, test = _parts(corpus, split)
    vocab = corpus_vocab(corpus)
    exp = _experiment(cfg)
    if args.mode == "lambda":
        rows, models = run_lambda_ablation(exp, vocab, train, val, test, LAMBDA_GRID)
        names = {w: f"lambda_{w.report:g}_{w.refine:g}" for w in models}
    else:
        rows, models = run_aggregation_ablation(exp, vocab, train, val, test, AGGREGATION_GRID, cfg.loss_weights())
        names = {k: "agg_" + k.replace(":", "") for k in models}
    (out / f"ablation_{args.mode}.csv").write_text(metrics_csv(rows))
    if args.save_models:
        for key, state in models.items():
            meta = {"resolved_config": cfg.raw, "refine": refine_to_dict(exp.refine)}
            ckpt_io.save(Checkpoint(state, AdamState(), meta), out / f"{names[key]}.ckpt")
    print(metrics_csv(rows), end="")
    return EXIT_OK


def cmd_noise(args) -> int:
    paths = [p for p in args.checkpoints.split(",") if p]
    if not paths:
        raise UsageError("--checkpoints needs at least one path")
    try:
        variances = [float(v) for v in args.variances.split(",")]
    except ValueError:
        raise UsageError(f"--variances must be comma-separated numbers, got {args.variances!r}") from None
    models = {Path(p).stem: ckpt_io.load(p).state for p in paths}
    examples = load_corpus(args.data)
    try:
        rows = run_noise_sweep(models, examples, variances, args.seed, args.beam, args.max_len)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    (out / "noise.csv").write_text(noise_csv(rows))
    print(noise_csv(rows), end="")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selfrefine-vlm", description="Train and evaluate a self-refining report generator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL corpus and its split file")
    g.add_argument("--spec", help="JSON file with generator fields (and optional split_counts)")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.set_defaults(func=cmd_gen_data)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=3")
        sp.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train one model")
    with_config(t)
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="beam-search reports for a JSONL corpus")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--input", required=True)
    gen.add_argument("--beam", type=int, default=3)
    gen.add_argument("--greedy", action="store_true", help="with --beam 1, use the greedy decoder")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a JSONL corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--beam", type=int, default=3)
    ev.add_argument("--max-len", type=int, default=None)
    ev.add_argument("--reference", action="store_true", help="score the ground-truth reports against themselves")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="loss-weight or aggregation ablation")
    ab.add_argument("--mode", choices=("lambda", "aggregation"), required=True)
    ab.add_argument("--save-models", action="store_true", help="also write one checkpoint per row")
    with_config(ab)
    ab.set_defaults(func=cmd_ablate)

    nz = sub.add_parser("noise", help="Gaussian pixel-noise robustness sweep")
    nz.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    nz.add_argument("--data", required=True, help="JSONL corpus to perturb")
    nz.add_argument("--variances", default="0,0.1,0.2,0.3,0.5")
    nz.add_argument("--seed", type=int, default=0, help="noise seed")
    nz.add_argument("--beam", type=int, default=3)
    nz.add_argument("--max-len", type=int, default=None)
    nz.add_argument("--out", required=True)
    nz.set_defaults(func=cmd_noise)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
