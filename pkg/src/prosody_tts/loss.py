"""Training objective: spectrum + weighted stop-token + weighted prosody loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import InputError
from .tensor import Tensor


@dataclass(frozen=True)
class LossBreakdown:
    l_spec: float
    l_stop: float
    l_prosody: float
    total: float
    alpha: float
    beta: float

    def recombined(self) -> float:
        return self.l_spec + self.alpha * self.l_stop + self.beta * self.l_prosody


def stop_weights(frame_mask: np.ndarray) -> np.ndarray:
    """Per-frame BCE weights: the final valid frame counts (T - 1) times.

    Padded frames get weight 0. A one-frame utterance keeps weight 1.
    """
    frame_mask = np.asarray(frame_mask, dtype=bool)
    weights = frame_mask.astype(np.float64)
    lengths = frame_mask.sum(axis=-1)
    for b, t in enumerate(lengths):
        if t:
            weights[b, t - 1] = max(t - 1, 1)
    return weights


def stop_labels(frame_mask: np.ndarray) -> np.ndarray:
    frame_mask = np.asarray(frame_mask, dtype=bool)
    labels = np.zeros(frame_mask.shape)
    for b, t in enumerate(frame_mask.sum(axis=-1)):
        if t:
            labels[b, t - 1] = 1.0
    return labels


def _check(name, a, b):
    sa = a.shape
    sb = np.shape(b.data if isinstance(b, Tensor) else b)
    if tuple(sa) != tuple(sb):
        raise InputError(f"{name}: prediction shape {tuple(sa)} != target shape {tuple(sb)}")


def compute_loss(mel_pre: Tensor, mel_post: Tensor, target_mel, stop_logits: Tensor, target_stop,
                 prosody_pred: Tensor, prosody_target, alpha: float, beta: float,
                 frame_mask=None, phone_mask=None) -> tuple[LossBreakdown, Tensor]:
    """Return the loss breakdown and the differentiable total.

    ``l_spec`` sums the mean squared error of the pre- and post-postnet mels,
    ``l_stop`` is the weighted binary cross-entropy mean on stop logits and
    ``l_prosody`` the mean squared error of the [P, 4] prosody. Masks (True
    for real frames / phones) exclude padding from every mean.
    """
    _check("mel (pre-postnet)", mel_pre, target_mel)
    _check("mel (post-postnet)", mel_post, target_mel)
    _check("stop", stop_logits, target_stop)
    _check("prosody", prosody_pred, prosody_target)
    frame_w = None if frame_mask is None else np.asarray(frame_mask, dtype=np.float64)[..., None]
    phone_w = None if phone_mask is None else np.asarray(phone_mask, dtype=np.float64)[..., None]
    l_spec = tc.add(tc.masked_mse(mel_pre, target_mel, frame_w), tc.masked_mse(mel_post, target_mel, frame_w))
    if frame_mask is None:
        w = stop_weights(np.ones(stop_logits.shape, dtype=bool).reshape(-1, stop_logits.shape[-1]))
        w = w.reshape(stop_logits.shape)
    else:
        w = stop_weights(frame_mask)
    bce = tc.bce_with_logits(stop_logits, target_stop)
    l_stop = tc.scale(tc.tsum(tc.mul(bce, Tensor(w.astype(bce.dtype)))), 1.0 / float(w.sum()))
    l_pros = tc.masked_mse(prosody_pred, prosody_target, phone_w)
    total = tc.add(tc.add(l_spec, tc.scale(l_stop, alpha)), tc.scale(l_pros, beta))
    breakdown = LossBreakdown(float(l_spec.data), float(l_stop.data), float(l_pros.data),
                              float(total.data), float(alpha), float(beta))
    return breakdown, total
