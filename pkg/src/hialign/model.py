"""Model composition for the two training phases.

PretrainModel wires frame/temporal/LM-stand-in encoders to the
localization and contrastive heads; TranslationModel replaces those heads
with the identity-initialized mapper and the autoregressive decoder.
Shared submodules carry identical parameter names in both models, and all
initialization is keyed by parameter name, so a fresh TranslationModel is
bit-identical to one whose shared weights were never pretrained — the
random-init ablation is literally "skip the checkpoint copy".
"""

from __future__ import annotations

import numpy as np

from . import alignment, ops, translation
from .autograd import ParameterStore, Tensor, rng_stream
from .encoders import (
    Decoder,
    FrameEncoder,
    Linear,
    LlmEncoder,
    Mapper,
    TemporalEncoder,
    TextEncoder,
)
from .exceptions import ContractError


class PretrainModel:
    def __init__(self, cfg, prototypes, text_vocab_size, seed):
        enc = cfg.encoder.validate()
        prototypes = np.asarray(prototypes, dtype=np.float32)
        if prototypes.shape[0] != enc.proto_dim:
            raise ContractError(
                f"prototype dim {prototypes.shape[0]} != configured proto_dim {enc.proto_dim}"
            )
        store = ParameterStore()
        self.frame = FrameEncoder(store, enc, seed)
        self.temporal = TemporalEncoder(store, enc, seed)
        self.llm = LlmEncoder(store, enc, seed)
        self.text = TextEncoder(store, enc, text_vocab_size, seed)
        self.proj = Linear(store, "proj", enc.proto_dim, enc.d_model, seed)
        f32 = np.float32
        self.tau_t = store.add("align.tau_T", Tensor(np.asarray(alignment.TAU_T_INIT, f32)))
        self.tau_u = store.add("align.tau_U", Tensor(np.asarray(alignment.TAU_U_INIT, f32)))
        self.tau_c = store.add("align.tau_c", Tensor(np.asarray(alignment.TAU_C_INIT, f32)))
        self.prototypes = store.add("prototypes", Tensor(prototypes), frozen=True)
        self.store = store
        self.cfg = cfg

    def encode_video(self, frames, frame_mask, rng=None):
        f = self.frame(Tensor(frames) if not isinstance(frames, Tensor) else frames, mask=frame_mask)
        return self.temporal(f, frame_mask, rng=rng)

    def pooled_text(self, ids, token_mask):
        """Sentence features from the frozen text twin, mean-pooled.  Pure
        constant per sentence; the trainer caches these across epochs."""
        return ops.mean_pool(self.text(ids, mask=token_mask), mask=token_mask)

    def losses(self, frames, frame_mask, labels, text_pooled=None, text_ids=None,
               token_mask=None, rng=None):
        """(L_align, L_psp) for one batch.  Pass either precomputed pooled
        text features [B,D] or raw token ids + mask."""
        z, zmask = self.encode_video(frames, frame_mask, rng=rng)
        zp = self.proj(z)
        s = alignment.similarity_scores(zp, self.prototypes)
        e_hat = alignment.localize(s, self.tau_t, self.tau_u, time_mask=zmask)
        l_psp = alignment.psp_loss(e_hat, labels)
        m = self.llm(z, mask=zmask, rng=rng)
        m_pooled = ops.mean_pool(m, mask=zmask)
        if text_pooled is None:
            if text_ids is None:
                raise ContractError("losses needs text_pooled or text_ids")
            text_pooled = self.pooled_text(text_ids, token_mask)
        elif not isinstance(text_pooled, Tensor):
            text_pooled = Tensor(np.asarray(text_pooled, dtype=np.float32))
        l_align = alignment.align_loss(m_pooled, text_pooled, self.tau_c)
        return l_align, l_psp

    def pretrain_loss(self, frames, frame_mask, labels, lam, **kw):
        l_align, l_psp = self.losses(frames, frame_mask, labels, **kw)
        return alignment.pretrain_loss(l_align, l_psp, lam), l_align, l_psp

    def clamp_temperatures(self):
        for t in (self.tau_t, self.tau_u):
            np.clip(t.data, alignment.TAU_LOC_MIN, alignment.TAU_MAX, out=t.data)
        np.clip(self.tau_c.data, alignment.TAU_MIN, alignment.TAU_MAX, out=self.tau_c.data)


class TranslationModel:
    def __init__(self, cfg, token_vocab_size, seed):
        enc = cfg.encoder.validate()
        store = ParameterStore()
        self.frame = FrameEncoder(store, enc, seed)
        self.temporal = TemporalEncoder(store, enc, seed)
        self.mapper = Mapper(store, enc, seed)
        self.llm = LlmEncoder(store, enc, seed)
        self.dec = Decoder(store, enc, token_vocab_size, seed)
        self.store = store
        self.cfg = cfg

    def memory(self, frames, frame_mask, rng=None):
        f = self.frame(Tensor(frames) if not isinstance(frames, Tensor) else frames, mask=frame_mask)
        z, zmask = self.temporal(f, frame_mask, rng=rng)
        return self.llm(self.mapper(z), mask=zmask, rng=rng), zmask

    def logits(self, ids, memory, memory_mask, rng=None):
        token_mask = np.asarray(ids) != translation.PAD
        return self.dec(ids, memory, token_mask=token_mask, memory_mask=memory_mask, rng=rng)

    def loss(self, frames, frame_mask, ids, rng=None):
        """Teacher-forced SLT loss on padded [B,L] ids (<bos> ... <eos> <pad>*)."""
        m, mmask = self.memory(frames, frame_mask, rng=rng)
        return translation.slt_loss(self.logits(ids, m, mmask, rng=rng), ids)

    def greedy(self, frames, frame_mask, max_len):
        """Greedy decode a batch; returns one id list per sample."""
        m, mmask = self.memory(frames, frame_mask)

        def step(ids):
            return self.logits(ids, m, mmask)

        return translation.greedy_decode(step, frames.shape[0], max_len)

    def init_from_arrays(self, arrays, strict_prefixes=("frame.", "temporal.", "llm.")):
        """Copy pretrained weights by name.  Names under the shared prefixes
        must exist in the arrays; everything else (mapper, decoder) keeps
        its fresh initialization."""
        copied = 0
        for name in self.store.names():
            if name in arrays:
                src = arrays[name]
                dst = self.store[name].data
                if src.shape != dst.shape:
                    raise ContractError(f"checkpoint shape mismatch for {name}: {src.shape} vs {dst.shape}")
                dst[...] = src.astype(dst.dtype)
                copied += 1
            elif name.startswith(strict_prefixes):
                raise ContractError(f"checkpoint missing shared parameter {name!r}")
        return copied


def dropout_rng(seed, step):
    return rng_stream(seed, 6, step)
