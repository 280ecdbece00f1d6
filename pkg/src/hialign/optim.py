"""AdamW with decoupled weight decay, global-norm clipping, and the
one-cycle cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ContractError, NonFiniteError


def one_cycle_cosine_lr(step, total_steps, warmup_steps, peak_lr):
    """Linear 0 -> peak over the warmup, cosine peak -> 0 over the rest."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ContractError(f"warmup {warmup_steps} must be < total {total_steps}")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def global_norm(arrays):
    total = 0.0
    for g in arrays:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(grads, max_norm=1.0):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.
    Returns (grads, pre-clip norm); no-op when already inside the ball."""
    norm = global_norm(grads.values())
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        grads = {n: g * factor for n, g in grads.items()}
    return grads, norm


class AdamW:
    """Decoupled weight decay: the decay term uses the original parameter
    value and is applied alongside (not through) the Adam step:

        w <- w - lr*wd*w - lr * m_hat / (sqrt(v_hat) + eps)

    Moments are kept per parameter name, so a parameter that is frozen in
    one stage and thawed in the next starts with fresh moments.
    """

    def __init__(self, store, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads, lr_t):
        """One update over the currently trainable parameters."""
        names = self.store.trainable_names()
        for n in names:
            if n not in grads:
                raise ContractError(f"missing gradient for trainable parameter {n!r}")
            if not np.all(np.isfinite(grads[n])):
                raise NonFiniteError(f"non-finite gradient for {n!r}; step aborted")
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n in names:
            w = self.store[n].data
            g = np.asarray(grads[n], dtype=w.dtype)
            if n not in self.m:
                self.m[n] = np.zeros_like(w)
                self.v[n] = np.zeros_like(w)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                w -= lr_t * self.wd * w
            w -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state):
        self.t = int(state["t"])
        self.m = {n: np.array(a) for n, a in state["m"].items()}
        self.v = {n: np.array(a) for n, a in state["v"].items()}


def clamp_tensor(t, lo, hi):
    np.clip(t.data, lo, hi, out=t.data)
