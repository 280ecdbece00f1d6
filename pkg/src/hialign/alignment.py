"""Pre-training objectives: pseudo-gloss localization and contrastive
video-sentence alignment.

Localization scores each prototype by where it fires in time: a softmax
over the time axis (per prototype, temperature tau_T) is multiplied
elementwise with a softmax over the prototype axis (per timestep,
temperature tau_U) and summed over time, giving presence scores strictly
inside (0,1) that are trained with BCE against the multi-hot extraction
labels.  The non-sign column takes part in both softmaxes but is excluded
from the BCE target.

Alignment is symmetric InfoNCE over cosine similarities of mean-pooled
video and sentence features with learnable temperature tau_c; in-batch
mismatches are the negatives.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor
from .exceptions import ContractError

TAU_MIN, TAU_MAX = 0.01, 100.0
# below ~0.05 the localization softmaxes act as argmax and stop learning
TAU_LOC_MIN = 0.05
TAU_T_INIT = 0.1
TAU_U_INIT = 0.1
TAU_C_INIT = 0.07


def similarity_scores(zp, prototypes):
    """Cosine similarity of every projected segment feature against every
    prototype column; accepts [T,D'] or [B,T,D'] (rows are independent)."""
    p = prototypes if isinstance(prototypes, Tensor) else Tensor(prototypes)
    if zp.ndim == 2:
        return ops.cosine_sim_matrix(zp, p)
    b, t, d = zp.shape
    flat = ops.cosine_sim_matrix(ops.reshape(zp, (b * t, d)), p)
    return ops.reshape(flat, (b, t, p.shape[1]))


def localize(s, tau_t, tau_u, time_mask=None):
    """Dual-temperature aggregation of a similarity map into presence scores.

    s: [T,U+1] or [B,T,U+1].  time_mask marks real timesteps; padded ones
    are banned from the temporal softmax so they carry no mass.
    Returns E_hat over the last axis: [U+1] or [B,U+1].
    """
    time_axis = s.ndim - 2
    s_time = s
    if time_mask is not None:
        bias = np.where(np.asarray(time_mask, dtype=bool), 0.0, -1e30).astype(s.dtype)
        s_time = ops.add(s, Tensor(bias[..., None]))
    s_hat_t = ops.softmax_temp(s_time, axis=time_axis, tau=tau_t)
    s_hat_u = ops.softmax_temp(s, axis=s.ndim - 1, tau=tau_u)
    return ops.sum_(ops.mul(s_hat_t, s_hat_u), axis=time_axis)


def psp_loss(e_hat, labels):
    """BCE between presence scores and multi-hot labels, non-sign column
    excluded; accepts [U+1]/[U] and batched [B,U+1]/[B,U] label pairs."""
    gloss_scores = e_hat[..., 1:]
    h = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if gloss_scores.shape != h.shape:
        raise ContractError(f"psp_loss: scores {gloss_scores.shape} vs labels {h.shape}")
    return ops.bce_mean(gloss_scores, Tensor(h.astype(gloss_scores.dtype)))


def align_loss(video_pooled, text_pooled, tau_c):
    """Symmetric InfoNCE over cosine similarities / tau_c.

    video_pooled, text_pooled: [B,D] with matched rows; every off-diagonal
    pair is a negative.  Averaged over both directions and the batch.
    """
    if video_pooled.ndim != 2 or video_pooled.shape != text_pooled.shape:
        raise ContractError(
            f"align_loss needs matching [B,D] inputs, got {video_pooled.shape} vs {text_pooled.shape}"
        )
    b = video_pooled.shape[0]
    if b == 0:
        raise ContractError("align_loss: empty batch")
    tau_val = tau_c.data if isinstance(tau_c, Tensor) else np.asarray(tau_c)
    if not np.all(tau_val > 0):
        raise ContractError(f"align_loss needs tau_c > 0, got {tau_val}")
    sim = ops.cosine_sim_matrix(video_pooled, ops.transpose(text_pooled, (1, 0)))
    logits = ops.div(sim, tau_c)
    eye = Tensor(np.eye(b, dtype=sim.dtype))
    row_diag = ops.sum_(ops.mul(ops.log_softmax(logits, axis=1), eye))
    col_diag = ops.sum_(ops.mul(ops.log_softmax(logits, axis=0), eye))
    return ops.scale(ops.add(row_diag, col_diag), -0.5 / b)


def pretrain_loss(l_align, l_psp, lam):
    """Weighted sum of the two pre-training objectives."""
    lam = float(lam)
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return ops.add(l_align, ops.scale(l_psp, lam))
