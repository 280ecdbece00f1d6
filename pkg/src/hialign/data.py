"""Synthetic corpus generation, dataset loading, and batching.

Each gloss owns a fixed random motion template (a short sequence of frame
vectors).  A sample draws a few glosses, renders its video as the
concatenated templates plus Gaussian noise, optionally interleaved with
non-sign pad segments of pure noise, and its sentence as the gloss surface
forms interleaved with function words.  The generator also emits the exact
POS lexicon and a random-unit-vector embedding table, so the pseudo-gloss
pipeline upstream of training is noise-free by construction.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import rng_stream
from .exceptions import ContractError, DataError
from .pseudo_gloss import EmbeddingTable, PosLexicon
from .tensor_io import read_tensor, save_tensor

CONTENT_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "NUM", "PRON", "PROPN")
DEFAULT_FUNCTION_WORDS = ("und", "die", "der", "es", "im", "am", "dann", "auch")


@dataclass
class SyntheticCorpusConfig:
    gloss_count: int = 50
    function_words: tuple = DEFAULT_FUNCTION_WORDS
    frames_per_gloss: tuple = (4, 8)
    glosses_per_sample: tuple = (3, 8)
    frame_dim: int = 64
    embed_dim: int = 64
    noise_sigma: float = 0.1
    pad_prob: float = 0.3
    pad_len: tuple = (2, 4)
    train_size: int = 500
    dev_size: int = 60
    test_size: int = 60
    seed: int = 0

    def validate(self):
        if self.gloss_count < 2:
            raise ContractError("gloss_count must be >= 2")
        if self.frames_per_gloss[0] < 1 or self.frames_per_gloss[0] > self.frames_per_gloss[1]:
            raise ContractError(f"bad frames_per_gloss range {self.frames_per_gloss}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if self.glosses_per_sample[0] < 1 or self.glosses_per_sample[1] > self.gloss_count:
            raise ContractError(
                f"glosses_per_sample {self.glosses_per_sample} incompatible with gloss_count {self.gloss_count}"
            )
        if not 0 <= self.pad_prob <= 1:
            raise ContractError("pad_prob must be in [0,1]")
        if min(self.train_size, self.dev_size, self.test_size) < 1:
            raise ContractError("split sizes must be >= 1")
        return self


@dataclass
class Sample:
    frames: np.ndarray          # [T*, D_in] float32
    sentence: list              # token strings
    glosses: list = field(default_factory=list)  # generator-only truth


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    lexicon: PosLexicon
    embeddings: EmbeddingTable

    def split(self, name):
        if name not in ("train", "dev", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


def _gloss_inventory(cfg):
    """(surface, lemma, tag) per gloss.  Half the surfaces are inflected so
    lemmatization does real work; tags cycle through the content set."""
    names = []
    for g in range(cfg.gloss_count):
        lemma = f"gloss{g:03d}"
        tag = CONTENT_TAGS[g % len(CONTENT_TAGS)]
        surface = lemma + "en" if g % 2 == 1 else lemma
        names.append((surface, lemma, tag))
    return names


def generate_corpus(cfg):
    """Build the full synthetic corpus; pure function of the config."""
    cfg.validate()
    inventory = _gloss_inventory(cfg)

    template_rng = rng_stream(cfg.seed, 1)
    lengths = template_rng.integers(cfg.frames_per_gloss[0], cfg.frames_per_gloss[1] + 1,
                                    size=cfg.gloss_count)
    templates = [
        template_rng.standard_normal((int(lengths[g]), cfg.frame_dim)).astype(np.float32)
        for g in range(cfg.gloss_count)
    ]

    # fixed collocation per gloss: most glosses carry a function word, some
    # none; deterministic so the sentence is a pure function of the gloss
    # sequence and translation quality measures content recovery
    colloc_rng = rng_stream(cfg.seed, 4)
    collocations = []
    for _ in range(cfg.gloss_count):
        if colloc_rng.random() < 0.7:
            collocations.append(str(colloc_rng.choice(np.asarray(cfg.function_words))))
        else:
            collocations.append(None)

    embed_rng = rng_stream(cfg.seed, 2)
    table = EmbeddingTable(cfg.embed_dim)
    for _, lemma, _ in inventory:
        v = embed_rng.standard_normal(cfg.embed_dim)
        table.set(lemma, (v / np.linalg.norm(v)).astype(np.float32))

    lexicon = PosLexicon()
    for surface, lemma, tag in inventory:
        lexicon.add(surface, lemma, tag)
    for w in cfg.function_words:
        lexicon.add(w, w, "OTHER")

    sizes = {"train": cfg.train_size, "dev": cfg.dev_size, "test": cfg.test_size}
    splits = {}
    for si, (split, size) in enumerate(sizes.items()):
        rng = rng_stream(cfg.seed, 3, si)
        samples = []
        for _ in range(size):
            samples.append(_make_sample(cfg, inventory, templates, collocations, rng))
        splits[split] = samples
    return Corpus(splits["train"], splits["dev"], splits["test"], lexicon, table)


def _make_sample(cfg, inventory, templates, collocations, rng):
    k = int(rng.integers(cfg.glosses_per_sample[0], cfg.glosses_per_sample[1] + 1))
    picks = rng.choice(cfg.gloss_count, size=k, replace=False)

    chunks = []

    def maybe_pad():
        if cfg.pad_prob > 0 and rng.random() < cfg.pad_prob:
            n = int(rng.integers(cfg.pad_len[0], cfg.pad_len[1] + 1))
            chunks.append(rng.standard_normal((n, cfg.frame_dim)).astype(np.float32))

    sentence = []
    glosses = []
    for g in picks:
        maybe_pad()
        chunks.append(templates[g].copy())
        if collocations[g] is not None:
            sentence.append(collocations[g])
        surface, lemma, _ = inventory[g]
        sentence.append(surface)
        glosses.append(lemma)
    maybe_pad()

    video = np.concatenate(chunks, axis=0)
    if cfg.noise_sigma > 0:
        video = video + cfg.noise_sigma * rng.standard_normal(video.shape).astype(np.float32)
    return Sample(frames=video.astype(np.float32), sentence=sentence, glosses=glosses)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus, out_dir):
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for split in ("train", "dev", "test"):
        samples = corpus.split(split)
        with open(out / f"sentences_{split}.txt", "w", encoding="utf-8") as sfh, open(
            out / f"glosses_{split}.txt", "w", encoding="utf-8"
        ) as gfh:
            entries = []
            for i, s in enumerate(samples):
                rel = f"features/{split}_{i:05d}.hfat"
                save_tensor(out / rel, s.frames)
                sfh.write(" ".join(s.sentence) + "\n")
                gfh.write(" ".join(s.glosses) + "\n")
                entries.append({"features": rel, "sentence_line": i})
        manifest[split] = entries
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    corpus.lexicon.save(out / "lexicon.tsv")
    corpus.embeddings.save(out / "embeddings.txt")


def load_corpus(data_dir):
    """Read a corpus back from its manifest; errors name the offending entry."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed manifest {manifest_path}: {e}") from None
    splits = {}
    for split in ("train", "dev", "test"):
        if split not in manifest:
            raise DataError(f"manifest missing split {split!r}")
        sent_path = root / f"sentences_{split}.txt"
        if not sent_path.exists():
            raise DataError(f"missing sentence file {sent_path}")
        with open(sent_path, encoding="utf-8") as fh:
            sentences = [line.rstrip("\n").split() for line in fh]
        gloss_path = root / f"glosses_{split}.txt"
        gloss_lines = []
        if gloss_path.exists():
            with open(gloss_path, encoding="utf-8") as fh:
                gloss_lines = [line.rstrip("\n").split() for line in fh]
        samples = []
        for entry in manifest[split]:
            fpath = root / entry["features"]
            if not fpath.exists():
                raise DataError(f"missing feature file {fpath} (split {split})")
            try:
                frames = read_tensor(fpath)
            except DataError as e:
                raise DataError(f"{fpath}: {e}") from None
            line = entry["sentence_line"]
            if not 0 <= line < len(sentences):
                raise DataError(f"sentence_line {line} out of range for split {split}")
            glosses = gloss_lines[line] if line < len(gloss_lines) else []
            samples.append(Sample(frames=frames.astype(np.float32), sentence=sentences[line],
                                  glosses=glosses))
        splits[split] = samples
    lexicon = PosLexicon.from_file(root / "lexicon.tsv")
    embeddings = EmbeddingTable.from_file(root / "embeddings.txt")
    return Corpus(splits["train"], splits["dev"], splits["test"], lexicon, embeddings)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    frames: np.ndarray      # [B, Tmax, D_in] float32, zero-padded
    frame_mask: np.ndarray  # [B, Tmax] bool
    sentences: list         # token-string lists
    indices: list           # sample positions within the split


def make_batches(samples, batch_size, seed=0, shuffle=False, epoch=0):
    """Deterministic batch iterator; padding to the batch max length."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle:
        order = rng_stream(seed, 4, epoch).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        idx = order[start : start + batch_size]
        group = [samples[i] for i in idx]
        tmax = max(s.frames.shape[0] for s in group)
        d = group[0].frames.shape[1]
        frames = np.zeros((len(group), tmax, d), dtype=np.float32)
        mask = np.zeros((len(group), tmax), dtype=bool)
        for j, s in enumerate(group):
            t = s.frames.shape[0]
            frames[j, :t] = s.frames
            mask[j, :t] = True
        yield Batch(frames=frames, frame_mask=mask,
                    sentences=[s.sentence for s in group], indices=[int(i) for i in idx])
