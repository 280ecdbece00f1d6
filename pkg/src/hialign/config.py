"""Run configuration: encoder / train / corpus sections in one JSON file.

Unknown keys anywhere are rejected outright — silently ignoring a typo like
"wieght_decay" costs hours.  The JSON key "lambda" maps to the attribute
``lambda_psp`` (lambda is a python keyword).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .data import SyntheticCorpusConfig
from .encoders import EncoderConfig
from .exceptions import ContractError, DataError


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    warmup_epochs: int = 5
    pretrain_epochs: int = 40
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    batch_size: int = 8
    lambda_psp: float = 1.0
    seed: int = 0
    deterministic: bool = True
    eval_max_len: int = 32
    eval_every: int = 1

    def validate(self):
        if self.lr <= 0 or self.pretrain_epochs < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ContractError("lr and epoch counts must be positive")
        if self.lambda_psp < 0:
            raise ContractError("lambda must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("batch_size and eval_every must be >= 1")
        if self.warmup_epochs < 0:
            raise ContractError("warmup_epochs must be >= 0")
        return self


@dataclass
class RunConfig:
    encoder: EncoderConfig
    train: TrainConfig
    corpus: SyntheticCorpusConfig

    def validate(self):
        self.encoder.validate()
        self.train.validate()
        self.corpus.validate()
        return self

    def to_dict(self):
        d = {
            "encoder": dataclasses.asdict(self.encoder),
            "train": dataclasses.asdict(self.train),
            "corpus": dataclasses.asdict(self.corpus),
        }
        d["train"]["lambda"] = d["train"].pop("lambda_psp")
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTION_TYPES = {"encoder": EncoderConfig, "train": TrainConfig, "corpus": SyntheticCorpusConfig}
_TUPLE_FIELDS = {"function_words", "frames_per_gloss", "glosses_per_sample", "pad_len"}


def _build_section(cls, raw, section):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = "lambda_psp" if (section == "train" and key == "lambda") else key
        if attr not in fields:
            raise DataError(f"unknown key {key!r} in config section {section!r}")
        if attr in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise DataError(f"bad config section {section!r}: {e}") from None


def config_from_dict(d):
    if not isinstance(d, dict):
        raise DataError("config root must be a JSON object")
    unknown = set(d) - set(_SECTION_TYPES)
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        raw = d.get(name, {})
        if not isinstance(raw, dict):
            raise DataError(f"config section {name!r} must be an object")
        sections[name] = _build_section(cls, raw, name)
    return RunConfig(**sections).validate()


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path}: {e}") from None
    return config_from_dict(raw)


def default_config():
    return RunConfig(EncoderConfig(), TrainConfig(), SyntheticCorpusConfig()).validate()
