"""Differentiable primitives.

Every op computes eagerly on numpy arrays, preserves the input float dtype
(float32 in production, float64 under gradcheck), and registers a closure
VJP on the active tape via ``apply_op``.  Heavy paths (softmax, norms,
attention rotations, losses) are fused primitives with hand-derived
backward passes; light glue (masked pooling, temperature scaling) is
composed from the primitives so it inherits correct gradients for free.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, apply_op, config
from .exceptions import ContractError


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and like.dtype.kind == "f" else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", out, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return apply_op("div", out, (a, b), bwd)


def neg(a):
    def bwd(g):
        return (-g,)

    return apply_op("neg", -a.data, (a,), bwd)


def pow_scalar(a, p):
    p = float(p)
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return apply_op("pow", out, (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return apply_op("exp", out, (a,), bwd)


def log(a):
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return apply_op("log", out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return apply_op("tanh", out, (a,), bwd)


def gelu(a):
    """tanh-approximate GELU (the transformer-block nonlinearity)."""
    x = a.data
    c = np.asarray(np.sqrt(2.0 / np.pi), dtype=x.dtype)
    k = np.asarray(0.044715, dtype=x.dtype)
    inner = c * (x + k * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return apply_op("gelu", out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return apply_op("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return apply_op("mean", out, (a,), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return apply_op("reshape", out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return apply_op("transpose", out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", out, tuple(tensors), bwd)


def getitem(a, idx):
    """Basic (slice/int/ellipsis) indexing; integer-array use goes through
    gather_rows so the scatter-add backward stays explicit."""
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return apply_op("getitem", out, (a,), bwd)


def gather_rows(a, ids):
    """Rows of ``a`` at integer ``ids`` (any shape); embedding lookup."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("gather_rows needs integer ids")
    out = a.data[ids]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, ids, g)
        return (full,)

    return apply_op("gather_rows", out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("matmul", out, (a, b), bwd)


def linear(x, w, b=None):
    """x[..., D_in] @ w[D_out, D_in]^T (+ b[D_out])."""
    y = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (a,), bwd)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (a,), bwd)


def softmax_temp(x, axis, tau):
    """softmax(x / tau) along ``axis``; tau may be a learnable scalar Tensor."""
    tau_val = tau.data if isinstance(tau, Tensor) else np.asarray(tau)
    if not np.all(tau_val > 0):
        raise ContractError(f"softmax_temp needs tau > 0, got {tau_val}")
    return softmax(div(x, tau), axis=axis)


# ---------------------------------------------------------------------------
# similarity and losses


def cosine_sim_matrix(a, b, eps=1e-8):
    """Rows of a[T,D'] vs columns of b[D',U]: dot / (max(|row|,eps)*max(|col|,eps)).

    The eps floor keeps an all-zero column (the non-sign prototype) at
    similarity ~0 instead of NaN, and kills its norm gradient exactly.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"cosine_sim_matrix shapes incompatible: {a.shape} vs {b.shape}")
    eps = np.asarray(eps, dtype=a.dtype)
    na_raw = np.linalg.norm(a.data, axis=1)
    nb_raw = np.linalg.norm(b.data, axis=0)
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    dots = a.data @ b.data
    out = dots / (na[:, None] * nb[None, :])

    def bwd(g):
        gn = g / (na[:, None] * nb[None, :])
        ga = gn @ b.data.T
        row_dot = (g * out).sum(axis=1)
        live_a = (na_raw > eps).astype(a.dtype)
        ga -= a.data * (live_a * row_dot / (na * na))[:, None]
        gb = a.data.T @ gn
        col_dot = (g * out).sum(axis=0)
        live_b = (nb_raw > eps).astype(b.dtype)
        gb -= b.data * (live_b * col_dot / (nb * nb))[None, :]
        return ga, gb

    return apply_op("cosine_sim_matrix", out, (a, b), bwd)


def bce_mean(pred, target):
    """Mean binary cross-entropy; pred clamped into the open interval so the
    logs stay finite even when rounding lands a value on exactly 0 or 1."""
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ContractError(f"bce_mean shape mismatch: {pred.shape} vs {t.shape}")
    delta = max(1e-12, float(np.finfo(pred.dtype).tiny))
    hi = min(1.0 - 1e-12, float(np.nextafter(pred.dtype.type(1.0), pred.dtype.type(0.0))))
    p = np.clip(pred.data, delta, hi)
    out = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean(), dtype=pred.dtype)
    inside = ((pred.data > delta) & (pred.data < hi)).astype(pred.dtype)

    def bwd(g):
        n = p.size
        gp = g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        return (gp, None)

    return apply_op("bce_mean", out, (pred, _as_tensor(t)), bwd)


def cross_entropy_logits(logits, targets, ignore_id=None):
    """Mean −log softmax(logits)[target] over non-ignored positions.

    logits [N,V] (flatten batched sequences first), targets int [N].
    """
    logits = _as_tensor(logits)
    ids = np.asarray(targets)
    if logits.ndim != 2 or ids.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy_logits needs [N,V] + [N], got {logits.shape} and {ids.shape}")
    keep = np.ones(ids.shape, dtype=bool) if ignore_id is None else ids != ignore_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ContractError("cross_entropy_logits: every position ignored")
    safe_ids = np.where(keep, ids, 0)
    if safe_ids.min() < 0 or safe_ids.max() >= logits.shape[1]:
        raise ContractError("cross_entropy_logits: target id out of range")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    logp = s - lse
    picked = logp[np.arange(len(ids)), safe_ids]
    out = np.asarray(-(picked * keep).sum() / n_keep, dtype=x.dtype)
    soft = np.exp(logp)

    def bwd(g):
        gd = soft.copy()
        gd[np.arange(len(ids)), safe_ids] -= 1.0
        gd *= (keep / n_keep)[:, None]
        return (g * gd,)

    return apply_op("cross_entropy_logits", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# normalization, dropout, rotary positions


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        n = xd.shape[-1]
        gh = g * gamma.data
        gsum = gh.sum(axis=-1, keepdims=True)
        gxsum = (gh * xhat).sum(axis=-1, keepdims=True)
        gx = inv / n * (n * gh - gsum - xhat * gxsum)
        red = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return apply_op("layer_norm", out, (x, gamma, beta), bwd)


def batch_norm_1d(x, gamma, beta, running_mean, running_var, mask=None,
                  momentum=0.1, eps=1e-5):
    """Per-channel batch norm over all leading axes of x[..., D].

    In train mode, statistics come from the mask-selected positions only
    (padded frames must not pollute them) and the running buffers are
    updated in place; eval mode normalizes with the running buffers.
    Padded positions still produce (normalized) outputs; downstream
    masking keeps them out of every loss.
    """
    xd = x.data
    d = xd.shape[-1]
    eps = np.asarray(eps, dtype=xd.dtype)
    flat = xd.reshape(-1, d)
    if mask is not None:
        mflat = np.asarray(mask, dtype=bool).reshape(-1)
    else:
        mflat = np.ones(flat.shape[0], dtype=bool)
    if config.training:
        sel = flat[mflat]
        n = sel.shape[0]
        if n == 0:
            raise ContractError("batch_norm_1d: empty batch (all positions masked)")
        mu = sel.mean(axis=0)
        var = sel.var(axis=0)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mu.astype(running_mean.dtype)
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.data.astype(xd.dtype)
        var = running_var.data.astype(xd.dtype)
        n = 0
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    train = config.training

    def bwd(g):
        gh = g * gamma.data
        red = tuple(range(xd.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        if not train:
            return gh * inv, dgamma, dbeta, None, None
        gh_flat = gh.reshape(-1, d)
        dmu = -(inv * gh_flat.sum(axis=0))
        dvar = (-0.5) * (inv**3) * ((xd - mu) * gh).reshape(-1, d).sum(axis=0)
        gx = gh * inv
        gx_flat = gx.reshape(-1, d).copy()
        xm = (flat - mu)
        gx_flat[mflat] += dmu / n + dvar * 2.0 * xm[mflat] / n
        return gx_flat.reshape(xd.shape), dgamma, dbeta, None, None

    return apply_op("batch_norm_1d", out, (x, gamma, beta, running_mean, running_var), bwd)


def dropout(x, p, rng=None):
    """Inverted dropout; identity in eval mode, in deterministic mode, or at p=0."""
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout needs 0 <= p < 1, got {p}")
    if p == 0.0 or not config.training or config.deterministic:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng stream")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    out = x.data * keep

    def bwd(g):
        return (g * keep,)

    return apply_op("dropout", out, (x,), bwd)


def rope_rotate(x, base=10000.0, positions=None):
    """Rotate feature pairs (2i, 2i+1) of x[..., T, D] by pos * base^(-2i/D).

    Norm-preserving by construction; the backward pass is the inverse
    rotation (angle negated) applied to the gradient.
    """
    xd = x.data
    t, d = xd.shape[-2], xd.shape[-1]
    if d % 2 != 0:
        raise ContractError(f"rope_rotate needs an even last extent, got {d}")
    if positions is None:
        positions = np.arange(t)
    pos = np.asarray(positions, dtype=xd.dtype)
    # angle(pos, i) = pos * base^(-2i/d)
    freqs = np.asarray(base, dtype=xd.dtype) ** (-2.0 * np.arange(d // 2, dtype=xd.dtype) / d)
    theta = pos[:, None] * freqs[None, :]
    cos = np.cos(theta)
    sin = np.sin(theta)
    a = xd[..., 0::2]
    b = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos

    def bwd(g):
        ga = g[..., 0::2]
        gb = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ga * cos + gb * sin
        gx[..., 1::2] = -ga * sin + gb * cos
        return (gx,)

    return apply_op("rope_rotate", out, (x,), bwd)


# ---------------------------------------------------------------------------
# composed helpers (inherit gradients from the primitives)


def mean_pool(x, mask=None):
    """x[..., N, D] -> [..., D]; with mask[..., N], average valid positions only."""
    if mask is None:
        return mean(x, axis=-2)
    m = np.asarray(mask, dtype=x.dtype)
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("mean_pool: a sequence has no unmasked positions")
    w = (m / counts[..., None])[..., None]
    return sum_(mul(x, Tensor(w)), axis=-2)


def scale(x, s):
    """Multiply by a python constant without growing the tape input arity."""
    return mul(x, Tensor(np.asarray(s, dtype=x.dtype)))


# ---------------------------------------------------------------------------
# operator sugar on Tensor

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, p: pow_scalar(self, p)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
Tensor.transpose = lambda self, *axes: transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
