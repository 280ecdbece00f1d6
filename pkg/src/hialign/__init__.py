"""hialign: hierarchical video-text alignment and translation on numpy.

A desk-scale, dependency-light stack: a tape-based autodiff engine, a
windowed transformer over frame features, pseudo-gloss prototype
localization, contrastive video-sentence alignment, and an autoregressive
translator, plus the synthetic corpus and metrics needed to exercise the
whole pipeline end to end on a laptop.
"""

from . import ops  # noqa: F401  (registers Tensor operator sugar)
from .autograd import (  # noqa: F401
    ParameterStore,
    Tape,
    Tensor,
    backward,
    deterministic_mode,
    nan_check_mode,
    rng_stream,
    tensor,
    training_mode,
)

__version__ = "0.1.0"
