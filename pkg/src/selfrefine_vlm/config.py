"""Run configuration: one JSON document, strict keys, documented defaults.

Sections and defaults::

    {
      "data":   {"n_examples": 720, "height": 16, "width": 16, "channels": 1,
                 "max_findings": 2, "seed": 0,
                 "corpus": null, "split": null, "split_counts": [500, 70, 150]},
      "model":  {"encoder": EncoderConfig, "mapper": MapperConfig, "decoder": DecoderConfig},
      "train":  {"lr": 1e-3, "epochs": 15, "batch_size": 6, "beta1": 0.9, "beta2": 0.999,
                 "eps": 1e-8, "weight_decay": 0.01,
                 "lambda_report": 0.3, "lambda_refine": 0.7},
      "refine": {"tau": 0.5, "noise_enabled": true, "aggregation": "attention",
                 "similarity": "cosine"},
      "eval":   {"variances": [0, 0.1, 0.2, 0.3, 0.5], "beam_width": 3, "max_len": 24},
      "seed": 0
    }

``corpus``/``split`` are optional file paths; when absent the corpus is
generated from the data fields and split with ``split_counts`` (``null``
falls back to a 70/10/20 ratio split). The top-level ``seed`` drives model
initialisation, minibatch order and Gumbel noise; the environment variable
``SERPENT_SEED`` overrides it.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

from .data import SyntheticSpec
from .decoder import DecoderConfig
from .mapper import MapperConfig
from .model import ModelConfig
from .refine import AggregationStrategy, GumbelConfig
from .train import LossWeights, RefineSettings, TrainConfig
from .vision import EncoderConfig

SEED_ENV = "SERPENT_SEED"


class ConfigError(ValueError):
    pass


def _field_defaults(cls, skip: Sequence[str] = ()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


def default_config() -> dict:
    data = _field_defaults(SyntheticSpec)
    data.update(corpus=None, split=None, split_counts=[500, 70, 150])
    train = _field_defaults(TrainConfig, skip=("seed",))
    train["lr"] = 1e-3
    train.update(lambda_report=0.3, lambda_refine=0.7)
    return {
        "data": data,
        "model": {
            "encoder": _field_defaults(EncoderConfig),
            "mapper": _field_defaults(MapperConfig),
            "decoder": _field_defaults(DecoderConfig),
        },
        "train": train,
        "refine": {
            "tau": 0.5,
            "noise_enabled": True,
            "aggregation": "attention",
            "similarity": "cosine",
        },
        "eval": {"variances": [0.0, 0.1, 0.2, 0.3, 0.5], "beam_width": 3, "max_len": 24},
        "seed": 0,
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; the value is JSON if it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    dotted, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, override: dict, sets: Sequence[str] = (), env: dict | None = None) -> RunConfig:
        if not isinstance(override, dict):
            raise ConfigError("config must be a JSON object")
        merged = _merge(default_config(), override)
        for text in sets:
            merged = _merge(merged, parse_override(text))
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                merged["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, sets: Sequence[str] = (), env: dict | None = None) -> RunConfig:
        raw: dict = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, sets, env)

    def validate(self) -> None:
        """Build every typed object once so bad values fail before any work starts."""
        try:
            self.synthetic_spec()
            self.model_config()
            self.train_config()
            self.loss_weights()
            self.refine_settings()
            self.eval_settings()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.raw["data"]
        return SyntheticSpec.from_dict({f.name: d[f.name] for f in fields(SyntheticSpec)})

    @property
    def split_counts(self) -> tuple[int, ...] | None:
        counts = self.raw["data"]["split_counts"]
        return None if counts is None else tuple(int(c) for c in counts)

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(EncoderConfig(**m["encoder"]), MapperConfig(**m["mapper"]), DecoderConfig(**m["decoder"]))

    def train_config(self) -> TrainConfig:
        t = {k: v for k, v in self.raw["train"].items() if not k.startswith("lambda_")}
        return TrainConfig(seed=self.seed, **t)

    def loss_weights(self) -> LossWeights:
        t = self.raw["train"]
        return LossWeights(float(t["lambda_report"]), float(t["lambda_refine"]))

    def refine_settings(self) -> RefineSettings:
        r = self.raw["refine"]
        if r["similarity"] not in ("dot", "cosine"):
            raise ConfigError(f"refine.similarity must be 'dot' or 'cosine', got {r['similarity']!r}")
        return RefineSettings(
            gumbel=GumbelConfig(tau=float(r["tau"]), noise_enabled=bool(r["noise_enabled"])),
            strategy=AggregationStrategy.parse(str(r["aggregation"])),
            similarity=r["similarity"],
        )

    def eval_settings(self) -> tuple[list[float], int, int | None]:
        e = self.raw["eval"]
        variances = [float(v) for v in e["variances"]]
        if any(v < 0 for v in variances):
            raise ConfigError("eval.variances must be nonnegative")
        beam = int(e["beam_width"])
        if beam < 1:
            raise ConfigError("eval.beam_width must be >= 1")
        max_len = None if e["max_len"] is None else int(e["max_len"])
        return variances, beam, max_len

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "resolved_config.json"
        path.write_text(self.to_json())
        return path


def refine_to_dict(refine: RefineSettings) -> dict:
    return {
        "gumbel": asdict(refine.gumbel),
        "strategy": str(refine.strategy),
        "similarity": refine.similarity,
    }
