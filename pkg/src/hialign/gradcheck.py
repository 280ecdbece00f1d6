"""Central-difference verification of the analytic gradients.

``gradcheck(f, params)`` runs f once under the tape to get analytic
gradients, then probes coordinates with central differences at 64-bit.
Exhaustive probing is quadratic in parameter count, so large tensors are
probed on a deterministic sample of coordinates; unit tests use small
tensors where the sample is exhaustive anyway.

Probing runs in deterministic mode (dropout off, batch-norm still sees the
same batch) so f is a fixed function of its parameters.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor, collect_gradients, deterministic_mode, rng_stream
from .exceptions import NonFiniteError


@dataclass
class GradReport:
    """Per-parameter worst relative error, plus overall pass/fail."""

    epsilon: float
    tolerance: float
    max_rel_err: dict = field(default_factory=dict)
    checked_coords: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self):
        lines = []
        for name in sorted(self.max_rel_err):
            flag = "ok " if name not in {f[0] for f in self.failures} else "FAIL"
            lines.append(f"{flag} {name}: rel_err={self.max_rel_err[name]:.3e} ({self.checked_coords[name]} coords)")
        return "\n".join(lines)


def _coords(shape, max_coords, seed, name):
    n = int(np.prod(shape)) if shape else 1
    if n <= max_coords:
        return np.arange(n)
    rng = rng_stream(seed, zlib.crc32(name.encode()))
    return rng.choice(n, size=max_coords, replace=False)


def gradcheck(f, params, epsilon=1e-4, tolerance=1e-4, max_coords=25, seed=0):
    """Compare analytic and central-difference gradients of a scalar function.

    params: dict name -> Tensor (float64 strongly recommended).  f is called
    as f() and must read the current contents of those tensors.  Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8); a parameter fails
    when its worst probed coordinate exceeds ``tolerance``.
    """
    report = GradReport(epsilon=epsilon, tolerance=tolerance)
    with deterministic_mode():
        tape = Tape()
        with tape:
            loss = f()
        tape.backward(loss)
        analytic = {}
        for name, t in params.items():
            analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            t.grad = None

        for name, t in params.items():
            flat = t.data.reshape(-1)
            aflat = analytic[name].reshape(-1)
            worst = 0.0
            coords = _coords(t.data.shape, max_coords, seed, name)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                lp = float(f().data)
                flat[c] = orig - epsilon
                lm = float(f().data)
                flat[c] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise NonFiniteError(f"non-finite loss while probing {name}[{c}]")
                num = (lp - lm) / (2.0 * epsilon)
                ana = float(aflat[c])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
            report.max_rel_err[name] = worst
            report.checked_coords[name] = len(coords)
            if worst > tolerance:
                report.failures.append((name, worst))
    return report


def numeric_gradient(f, x, epsilon=1e-4):
    """Dense central-difference gradient of scalar f w.r.t. one array
    (the oracle the op unit tests compare against)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        lp = float(f(x))
        flat[i] = orig - epsilon
        lm = float(f(x))
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * epsilon)
    return g
