"""Word-level token vocabulary, the teacher-forced SLT loss, and greedy
autoregressive decoding."""

from __future__ import annotations

import numpy as np

from . import ops
from .exceptions import ContractError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class TokenVocab:
    """token <-> id bijection with reserved specials at fixed low ids.

    Built from the training split's target sentences only; anything unseen
    maps to <unk> at encode time.
    """

    def __init__(self, tokens):
        for s in SPECIALS:
            if s in tokens:
                raise ContractError(f"reserved token {s!r} appears in the corpus")
        self.tokens = list(SPECIALS) + list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("duplicate tokens in vocabulary")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_sentences(cls, sentences):
        vocab = sorted({tok for sent in sentences for tok in sent})
        return cls(vocab)

    @property
    def size(self):
        return len(self.tokens)

    def encode(self, tokens):
        """<bos> + ids + <eos>."""
        return [BOS] + [self._index.get(t, UNK) for t in tokens] + [EOS]

    def decode(self, ids):
        """Token strings, stopping at <eos>, skipping other specials."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out


def slt_loss(logits, target_ids):
    """Teacher-forced cross-entropy: position j of the logits predicts
    target j+1; <pad> positions are ignored.

    logits: [B,L,V] over the full <bos>-led sequence; target_ids: [B,L].
    """
    ids = np.asarray(target_ids)
    if logits.ndim != 3 or ids.shape != logits.shape[:2]:
        raise ContractError(f"slt_loss: logits {logits.shape} vs ids {ids.shape}")
    if ids.shape[1] < 2:
        raise ContractError("slt_loss needs sequences of length >= 2 (<bos> + content)")
    b, l, v = logits.shape
    pred = ops.reshape(logits[:, :-1, :], (b * (l - 1), v))
    gold = ids[:, 1:].reshape(-1)
    return ops.cross_entropy_logits(pred, gold, ignore_id=PAD)


def greedy_decode(step_fn, batch_size, max_len):
    """Batched greedy decoding from <bos>.

    step_fn(ids [B,cur]) -> logits [B,cur,V] for the running prefixes.
    Ties go to the lowest id (argmax picks the first maximum).  Returns one
    id list per sequence: <bos> excluded, <eos> included when produced,
    hard-capped at max_len tokens.
    """
    if max_len < 1:
        raise ContractError(f"greedy_decode needs max_len >= 1, got {max_len}")
    ids = np.full((batch_size, 1), BOS, dtype=np.int64)
    finished = np.zeros(batch_size, dtype=bool)
    for _ in range(max_len):
        logits = step_fn(ids)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
        nxt = np.where(finished, PAD, nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        finished |= nxt == EOS
        if finished.all():
            break
    out = []
    for row in ids:
        seq = []
        for tok in row[1:]:
            seq.append(int(tok))
            if tok == EOS:
                break
        out.append(seq)
    return out
