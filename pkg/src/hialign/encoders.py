"""The feature hierarchy: frames -> segments -> video, plus the text side.

Frame vectors are projected and batch-normalized, refined by a 4-layer
windowed transformer with rotary positions and a factor-2 temporal
downsample after layer 2, then passed through a small trainable stand-in
for a pretrained language-model encoder whose query/value projections
carry low-rank adapters.  A frozen twin of that stand-in embeds the target
sentence.  Fine-tuning inserts an identity-initialized linear mapper
between the temporal encoder and the stand-in.

Everything here is a thin parameter-owning wrapper over hialign.ops;
masks travel alongside activations as plain numpy bool arrays and turn
into additive -1e30 score biases inside attention, so banned weights
underflow to exactly zero instead of drifting through NaN.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, rng_stream
from .exceptions import ContractError, DataError

MASK_BIAS = -1e30


@dataclass
class EncoderConfig:
    frame_dim: int = 64
    d_model: int = 512
    temporal_layers: int = 4
    heads: int = 8
    ffn: int = 2048
    window: int = 7
    downsample_after_layer: int = 2
    downsample_factor: int = 2
    rope_base: float = 10000.0
    llm_layers: int = 2
    decoder_layers: int = 2
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    proto_dim: int = 300

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if (self.d_model // self.heads) % 2 != 0:
            raise ContractError(f"head dim {self.d_model // self.heads} must be even for rotary positions")
        if self.window % 2 != 1:
            raise ContractError(f"window must be odd, got {self.window}")
        if self.downsample_factor != 2:
            raise ContractError("only factor-2 downsampling is implemented")
        if not 0 <= self.downsample_after_layer <= self.temporal_layers:
            raise ContractError("downsample_after_layer out of range")
        if self.lora_rank < 0 or not 0 <= self.lora_dropout < 1:
            raise ContractError("invalid lora settings")
        return self


def _param_rng(seed, name):
    return rng_stream(seed, zlib.crc32(name.encode()))


def xavier(store, name, shape, seed, frozen=False):
    rng = _param_rng(seed, name)
    fan_out, fan_in = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return store.add(name, Tensor(rng.uniform(-a, a, size=shape).astype(np.float32)), frozen=frozen)


class Linear:
    def __init__(self, store, name, d_out, d_in, seed, bias=True, frozen=False, init=None):
        if init is None:
            self.w = xavier(store, name + ".w", (d_out, d_in), seed, frozen=frozen)
        else:
            self.w = store.add(name + ".w", Tensor(np.asarray(init, dtype=np.float32)), frozen=frozen)
        self.b = store.add(name + ".b", Tensor(np.zeros(d_out, dtype=np.float32)), frozen=frozen) if bias else None

    def __call__(self, x, rng=None):
        return ops.linear(x, self.w, self.b)


class LoraLinear:
    """Frozen base linear plus a trainable low-rank residual.

    y = W x + b + (alpha/rank) * B (A dropout(x)).  A is Gaussian, B starts
    at zero, so the adapted layer equals the frozen base exactly at init.
    rank 0 degenerates to the plain frozen linear.
    """

    def __init__(self, store, name, d_out, d_in, seed, rank, alpha, p):
        if rank > min(d_in, d_out):
            raise ContractError(f"lora rank {rank} exceeds min({d_in},{d_out})")
        self.w = xavier(store, name + ".base_w", (d_out, d_in), seed, frozen=True)
        self.b = store.add(name + ".base_b", Tensor(np.zeros(d_out, dtype=np.float32)), frozen=True)
        self.rank = rank
        self.alpha = float(alpha)
        self.p = float(p)
        if rank > 0:
            rng = _param_rng(seed, name + ".lora_a")
            a_init = (rng.standard_normal((rank, d_in)) / np.sqrt(d_in)).astype(np.float32)
            self.a = store.add(name + ".lora_a", Tensor(a_init))
            self.bb = store.add(name + ".lora_b", Tensor(np.zeros((d_out, rank), dtype=np.float32)))
        else:
            self.a = self.bb = None

    def __call__(self, x, rng=None):
        y = ops.linear(x, self.w, self.b)
        if self.rank == 0 or self.alpha == 0.0:
            return y
        h = ops.dropout(x, self.p, rng)
        delta = ops.linear(ops.linear(h, self.a), self.bb)
        return ops.add(y, ops.scale(delta, self.alpha / self.rank))


class LayerNorm:
    def __init__(self, store, name, d, frozen=False):
        self.g = store.add(name + ".g", Tensor(np.ones(d, dtype=np.float32)), frozen=frozen)
        self.b = store.add(name + ".b", Tensor(np.zeros(d, dtype=np.float32)), frozen=frozen)

    def __call__(self, x):
        return ops.layer_norm(x, self.g, self.b)


class BatchNorm1d:
    """Mask-aware batch norm over all leading axes, per channel.

    Uses batch statistics (and updates the running buffers) only while its
    affine parameters are trainable; a frozen or eval-mode instance
    normalizes with the running buffers, so frozen stages leave bit-identical
    snapshots.
    """

    def __init__(self, store, name, d, momentum=0.1):
        self.g = store.add(name + ".gamma", Tensor(np.ones(d, dtype=np.float32)))
        self.b = store.add(name + ".beta", Tensor(np.zeros(d, dtype=np.float32)))
        self.mean = store.add(name + ".mean", Tensor(np.zeros(d, dtype=np.float32)), frozen=True)
        self.var = store.add(name + ".var", Tensor(np.ones(d, dtype=np.float32)), frozen=True)
        self.momentum = momentum

    def __call__(self, x, mask=None):
        from .autograd import config, training_mode

        live = config.training and self.g.requires_grad
        if live:
            return ops.batch_norm_1d(x, self.g, self.b, self.mean, self.var,
                                     mask=mask, momentum=self.momentum)
        with training_mode(False):
            return ops.batch_norm_1d(x, self.g, self.b, self.mean, self.var, mask=mask)


class FrameEncoder:
    """Linear projection of raw frame vectors to the model width, then BN."""

    def __init__(self, store, cfg, seed, name="frame"):
        self.lin = Linear(store, name + ".lin", cfg.d_model, cfg.frame_dim, seed)
        self.bn = BatchNorm1d(store, name + ".bn", cfg.d_model)

    def __call__(self, x, mask=None):
        if x.shape[-2] == 0:
            raise ContractError("frame_encode: empty input (no frames)")
        return self.bn(self.lin(x), mask=mask)


def band_bias(t, window, dtype=np.float32):
    """[1,1,T,T] additive bias banning |i-j| > (window-1)/2."""
    r = (window - 1) // 2
    idx = np.arange(t)
    band = np.abs(idx[:, None] - idx[None, :]) <= r
    return np.where(band, 0.0, MASK_BIAS).astype(dtype)[None, None]


def key_padding_bias(mask, dtype=np.float32):
    """mask[B,Tk] -> [B,1,1,Tk] additive bias banning padded keys."""
    m = np.asarray(mask, dtype=bool)
    return np.where(m, 0.0, MASK_BIAS).astype(dtype)[:, None, None, :]


def causal_bias(t, dtype=np.float32):
    return np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, MASK_BIAS).astype(dtype)[None, None]


class Attention:
    """Multi-head attention over [B,T,D] with additive score bias.

    Rotary positions are applied to queries and keys unless disabled
    (cross-attention reads positions from the memory content instead).
    """

    def __init__(self, store, name, cfg, seed, q_cls=Linear, v_cls=Linear, rope=True, frozen=False):
        d, self.heads = cfg.d_model, cfg.heads
        self.dh = d // cfg.heads
        self.rope_base = cfg.rope_base if rope else None
        lora_args = dict(rank=cfg.lora_rank, alpha=cfg.lora_alpha, p=cfg.lora_dropout)
        plain_args = dict(frozen=frozen)
        self.q = q_cls(store, name + ".q", d, d, seed, **(lora_args if q_cls is LoraLinear else plain_args))
        self.k = Linear(store, name + ".k", d, d, seed, frozen=frozen)
        self.v = v_cls(store, name + ".v", d, d, seed, **(lora_args if v_cls is LoraLinear else plain_args))
        self.out = Linear(store, name + ".out", d, d, seed, frozen=frozen)

    def _split(self, x):
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, x, memory=None, bias=None, rng=None, return_weights=False):
        src = x if memory is None else memory
        qh = self._split(self.q(x, rng=rng))
        kh = self._split(self.k(src))
        vh = self._split(self.v(src, rng=rng))
        if self.rope_base is not None:
            qh = ops.rope_rotate(qh, base=self.rope_base)
            kh = ops.rope_rotate(kh, base=self.rope_base)
        scores = ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dh))
        if bias is not None:
            scores = ops.add(scores, Tensor(np.asarray(bias, dtype=scores.dtype)))
        w = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(w, vh)
        b, _, t, _ = ctx.shape
        out = self.out(ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, self.heads * self.dh)))
        if return_weights:
            return out, w.data
        return out


class FeedForward:
    def __init__(self, store, name, cfg, seed, frozen=False):
        self.up = Linear(store, name + ".up", cfg.ffn, cfg.d_model, seed, frozen=frozen)
        self.down = Linear(store, name + ".down", cfg.d_model, cfg.ffn, seed, frozen=frozen)

    def __call__(self, x):
        return self.down(ops.gelu(self.up(x)))


class EncoderBlock:
    """Pre-norm residual block: attention then GELU feed-forward."""

    def __init__(self, store, name, cfg, seed, lora=False, frozen=False):
        if lora and frozen:
            raise ContractError("a block is either adapted (lora) or frozen, not both")
        self.ln1 = LayerNorm(store, name + ".ln1", cfg.d_model, frozen=frozen)
        if lora:
            self.attn = Attention(store, name + ".attn", cfg, seed, q_cls=LoraLinear, v_cls=LoraLinear)
        else:
            self.attn = Attention(store, name + ".attn", cfg, seed, frozen=frozen)
        self.ln2 = LayerNorm(store, name + ".ln2", cfg.d_model, frozen=frozen)
        self.ffn = FeedForward(store, name + ".ffn", cfg, seed, frozen=frozen)

    def __call__(self, x, bias=None, rng=None):
        x = ops.add(x, self.attn(self.ln1(x), bias=bias, rng=rng))
        return ops.add(x, self.ffn(self.ln2(x)))


def pair_downsample(x, mask):
    """Mean of adjacent frame pairs; odd tail kept alone.  Pairs where one
    frame is padding average only the real frame; fully padded pairs go to
    zero and stay masked.  Returns (y, new_mask) with len ceil(T/2)."""
    b, t, _ = x.shape
    m = np.asarray(mask, dtype=x.dtype)
    te = t - (t % 2)
    parts = []
    mparts = []
    if te > 0:
        ma, mb = m[:, 0:te:2], m[:, 1:te:2]
        tot = np.maximum(ma + mb, 1.0)
        wa, wb = ma / tot, mb / tot
        a = ops.mul(x[:, 0:te:2], Tensor(wa[:, :, None]))
        bpart = ops.mul(x[:, 1:te:2], Tensor(wb[:, :, None]))
        parts.append(ops.add(a, bpart))
        mparts.append(np.maximum(ma, mb))
    if t % 2 == 1:
        mlast = m[:, t - 1 :]
        parts.append(ops.mul(x[:, t - 1 :], Tensor(mlast[:, :, None])))
        mparts.append(mlast)
    y = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
    return y, np.concatenate(mparts, axis=1).astype(bool)


class TemporalEncoder:
    """Windowed-attention transformer with a mid-stack temporal downsample."""

    def __init__(self, store, cfg, seed, name="temporal"):
        self.cfg = cfg
        self.blocks = [
            EncoderBlock(store, f"{name}.{i}", cfg, seed) for i in range(cfg.temporal_layers)
        ]
        self.ln_f = LayerNorm(store, name + ".ln_f", cfg.d_model)

    def __call__(self, x, mask, rng=None):
        for i, block in enumerate(self.blocks):
            if i == self.cfg.downsample_after_layer:
                x, mask = pair_downsample(x, mask)
            t = x.shape[1]
            bias = band_bias(t, self.cfg.window, dtype=x.dtype) + key_padding_bias(mask, dtype=x.dtype)
            x = block(x, bias=bias, rng=rng)
        if self.cfg.downsample_after_layer == len(self.blocks):
            x, mask = pair_downsample(x, mask)
        return self.ln_f(x), mask


class LlmEncoder:
    """Trainable stand-in for a pretrained LM encoder; full attention with
    low-rank adapters on the query/value projections (frozen bases)."""

    def __init__(self, store, cfg, seed, name="llm", layers=None, frozen=False):
        self.blocks = [
            EncoderBlock(store, f"{name}.{i}", cfg, seed, lora=not frozen, frozen=frozen)
            for i in range(layers if layers is not None else cfg.llm_layers)
        ]
        self.ln_f = LayerNorm(store, name + ".ln_f", cfg.d_model, frozen=frozen)

    def __call__(self, x, mask=None, rng=None):
        bias = None if mask is None else key_padding_bias(mask, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, bias=bias, rng=rng)
        return self.ln_f(x)


class TextEncoder:
    """Frozen twin of the LM-encoder stand-in over token embeddings."""

    def __init__(self, store, cfg, vocab_size, seed, name="text"):
        rng = _param_rng(seed, name + ".embed")
        emb = (rng.standard_normal((vocab_size, cfg.d_model)) / np.sqrt(cfg.d_model)).astype(np.float32)
        self.embed = store.add(name + ".embed", Tensor(emb), frozen=True)
        self.vocab_size = vocab_size
        self.stack = _FrozenStack(store, cfg, seed, name)

    def __call__(self, ids, mask=None):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DataError(f"token id out of range for text vocab of {self.vocab_size}")
        x = ops.gather_rows(self.embed, ids)
        return self.stack(x, mask=mask)


class _FrozenStack:
    def __init__(self, store, cfg, seed, name):
        self.blocks = []
        for i in range(cfg.llm_layers):
            block = EncoderBlock(store, f"{name}.{i}", cfg, seed, frozen=True)
            self.blocks.append(block)
        self.ln_f = LayerNorm(store, name + ".ln_f", cfg.d_model, frozen=True)

    def __call__(self, x, mask=None):
        bias = None if mask is None else key_padding_bias(mask, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, bias=bias)
        return self.ln_f(x)


class Mapper:
    """Single linear layer, identity-initialized so fine-tuning starts from
    the pre-trained representation unchanged."""

    def __init__(self, store, cfg, seed, name="mapper"):
        self.lin = Linear(store, name, cfg.d_model, cfg.d_model, seed,
                          init=np.eye(cfg.d_model, dtype=np.float32))

    def __call__(self, x):
        return self.lin(x)


class DecoderBlock:
    def __init__(self, store, name, cfg, seed):
        self.ln1 = LayerNorm(store, name + ".ln1", cfg.d_model)
        self.self_attn = Attention(store, name + ".self", cfg, seed, q_cls=LoraLinear, v_cls=LoraLinear)
        self.ln2 = LayerNorm(store, name + ".ln2", cfg.d_model)
        self.cross_attn = Attention(store, name + ".cross", cfg, seed,
                                    q_cls=LoraLinear, v_cls=LoraLinear, rope=False)
        self.ln3 = LayerNorm(store, name + ".ln3", cfg.d_model)
        self.ffn = FeedForward(store, name + ".ffn", cfg, seed)

    def __call__(self, x, memory, self_bias, cross_bias, rng=None):
        x = ops.add(x, self.self_attn(self.ln1(x), bias=self_bias, rng=rng))
        x = ops.add(x, self.cross_attn(self.ln2(x), memory=memory, bias=cross_bias, rng=rng))
        return ops.add(x, self.ffn(self.ln3(x)))


class Decoder:
    """Toy-depth causal transformer with cross-attention to video features."""

    def __init__(self, store, cfg, vocab_size, seed, name="dec"):
        rng = _param_rng(seed, name + ".embed")
        emb = (rng.standard_normal((vocab_size, cfg.d_model)) / np.sqrt(cfg.d_model)).astype(np.float32)
        self.embed = store.add(name + ".embed", Tensor(emb))
        self.vocab_size = vocab_size
        self.blocks = [DecoderBlock(store, f"{name}.{i}", cfg, seed) for i in range(cfg.decoder_layers)]
        self.ln_f = LayerNorm(store, name + ".ln_f", cfg.d_model)
        self.out = Linear(store, name + ".out", vocab_size, cfg.d_model, seed)

    def __call__(self, ids, memory, token_mask=None, memory_mask=None, rng=None):
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ContractError("decoder needs non-empty [B,L] token ids")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise DataError(f"token id out of range for decoder vocab of {self.vocab_size}")
        t = ids.shape[1]
        x = ops.gather_rows(self.embed, ids)
        self_bias = causal_bias(t, dtype=x.dtype)
        if token_mask is not None:
            self_bias = self_bias + key_padding_bias(token_mask, dtype=x.dtype)
        cross_bias = None if memory_mask is None else key_padding_bias(memory_mask, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, memory, self_bias, cross_bias, rng=rng)
        return self.out(self.ln_f(x))
