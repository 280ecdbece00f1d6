"""Pseudo-gloss extraction, vocabulary, labels, and the frozen prototype bank.

The gloss-free trick: spoken-language sentences are filtered down to
content lemmas (nouns, numerals, adverbs, pronouns, proper nouns,
adjectives, verbs), those lemmas become a vocabulary of U pseudo-glosses,
and each gets a unit-normalized word-embedding column in a frozen matrix P
of shape [D', U+1].  Column 0 is the all-zero non-sign prototype: frames
that match nothing land there because cosine against a zero vector is
pinned at ~0 by the epsilon guard.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DataError

KEEP_TAGS = frozenset({"NOUN", "NUM", "ADV", "PRON", "PROPN", "ADJ", "VERB"})
ALL_TAGS = KEEP_TAGS | {"OTHER"}


class PosLexicon:
    """Total map lowercase token -> (lemma, tag); unknown -> (token, OTHER).

    Stands in for a statistical tagger: at desk scale the corpus generator
    writes the exact lexicon, so tagging is error-free by construction.
    """

    def __init__(self, entries=None):
        self._table = {}
        if entries:
            for token, lemma, tag in entries:
                self.add(token, lemma, tag)

    def add(self, token, lemma, tag):
        if tag not in ALL_TAGS:
            raise DataError(f"unknown POS tag {tag!r} for token {token!r}")
        self._table[token.lower()] = (lemma.lower(), tag)

    def lookup(self, token):
        token = token.lower()
        return self._table.get(token, (token, "OTHER"))

    def __len__(self):
        return len(self._table)

    @classmethod
    def from_file(cls, path):
        """Parse `token<TAB>lemma<TAB>TAG` lines; blank lines ignored."""
        lex = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                try:
                    lex.add(*parts)
                except DataError as e:
                    raise DataError(f"{path}:{lineno}: {e}") from None
        return lex

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token in sorted(self._table):
                lemma, tag = self._table[token]
                fh.write(f"{token}\t{lemma}\t{tag}\n")


def extract_pseudo_glosses(tokens, lexicon):
    """Kept lemmas in first-occurrence order, deduplicated (presence semantics)."""
    seen = set()
    out = []
    for tok in tokens:
        lemma, tag = lexicon.lookup(tok)
        if tag in KEEP_TAGS and lemma not in seen:
            seen.add(lemma)
            out.append(lemma)
    return out


@dataclass(frozen=True)
class PseudoGlossVocab:
    lemmas: tuple

    def __post_init__(self):
        object.__setattr__(self, "_index", {l: i for i, l in enumerate(self.lemmas)})

    @property
    def size(self):
        return len(self.lemmas)

    def index(self, lemma):
        return self._index.get(lemma)

    def __contains__(self, lemma):
        return lemma in self._index

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for lemma in self.lemmas:
                fh.write(lemma + "\n")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            lemmas = [line.rstrip("\n") for line in fh if line.strip()]
        if len(set(lemmas)) != len(lemmas):
            raise DataError(f"duplicate lemma in vocab file {path}")
        return cls(tuple(lemmas))


def build_vocab(sentences, lexicon):
    """Sorted union of extracted lemmas over the training split only.

    dev/test-only lemmas never enter the vocabulary; their labels simply
    contribute nothing.
    """
    union = set()
    for tokens in sentences:
        union.update(extract_pseudo_glosses(tokens, lexicon))
    if not union:
        raise ContractError("degenerate corpus: no pseudo-glosses extracted")
    return PseudoGlossVocab(tuple(sorted(union)))


def labels_for(tokens, lexicon, vocab):
    """Multi-hot H over U (non-sign column excluded)."""
    h = np.zeros(vocab.size, dtype=np.float32)
    for lemma in extract_pseudo_glosses(tokens, lexicon):
        idx = vocab.index(lemma)
        if idx is not None:
            h[idx] = 1.0
    return h


def _hash_unit_vector(lemma, dim):
    """Deterministic unit vector for a lemma missing from the table.

    Seeded from a stable digest so the fallback does not depend on python
    hash randomization or platform.
    """
    digest = hashlib.sha256(lemma.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0)]))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


class EmbeddingTable:
    """lemma -> D' vector, loaded from the `<count> <dim>` text format."""

    def __init__(self, dim, table=None):
        self.dim = int(dim)
        self._table = dict(table or {})

    def __contains__(self, lemma):
        return lemma in self._table

    def get(self, lemma):
        return self._table.get(lemma)

    def set(self, lemma, vec):
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DataError(f"embedding for {lemma!r} has shape {vec.shape}, expected ({self.dim},)")
        self._table[lemma] = vec

    def __len__(self):
        return len(self._table)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataError(f"{path}: expected `<count> <dim>` header")
            try:
                count, dim = int(header[0]), int(header[1])
            except ValueError:
                raise DataError(f"{path}: non-integer header fields {header}") from None
            table = cls(dim)
            for lineno, line in enumerate(fh, 2):
                parts = line.split()
                if not parts:
                    continue
                lemma, vals = parts[0], parts[1:]
                if len(vals) != dim:
                    raise DataError(f"{path}:{lineno}: {len(vals)} values, expected {dim}")
                table.set(lemma, np.array([float(v) for v in vals], dtype=np.float32))
        if len(table) != count:
            raise DataError(f"{path}: header says {count} entries, file has {len(table)}")
        return table

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self._table)} {self.dim}\n")
            for lemma in sorted(self._table):
                vals = " ".join(f"{v:.6f}" for v in self._table[lemma])
                fh.write(f"{lemma} {vals}\n")


def build_prototypes(vocab, embeddings):
    """Frozen prototype matrix [D', U+1]: zero non-sign column, then one
    unit column per vocabulary lemma (hash-seeded fallback when the lemma
    is missing from the table)."""
    dim = embeddings.dim
    mat = np.zeros((dim, vocab.size + 1), dtype=np.float32)
    for u, lemma in enumerate(vocab.lemmas, start=1):
        vec = embeddings.get(lemma)
        if vec is None:
            vec = _hash_unit_vector(lemma, dim)
        else:
            norm = np.linalg.norm(vec)
            if norm == 0:
                raise DataError(f"zero embedding vector for lemma {lemma!r}")
            vec = vec / norm
        mat[:, u] = vec
    return mat
