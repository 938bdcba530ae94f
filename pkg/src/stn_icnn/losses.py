"""Training criteria: sigmoid binary cross entropy, system loss, Smooth L1."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .labels import PARTS
from .stn import crop_parts
from .tensor import Tensor, no_grad, tensor_op

__all__ = ["bce_mean", "coarse_loss", "system_loss", "smooth_l1", "crop_part_targets"]


def _check_same(a, b, name):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_mean(scores: Tensor, target) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(scores)`` against binary targets.

    Uses the stable form ``max(x, 0) - x t + log(1 + exp(-|x|))``.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    _check_same(scores, t, "bce_mean")
    x = scores.data
    t = t.astype(x.dtype, copy=False)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(per.sum(dtype=np.float64) / n, dtype=x.dtype)

    def bw(g):
        p = np.empty_like(x)
        pos = x >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        p[~pos] = e / (1.0 + e)
        return ((p - t) * (g / n),)

    return tensor_op(out, (scores,), bw, "bce")


def coarse_loss(z: Tensor, resized_labels) -> Tensor:
    """Coarse-stage loss: BCE over every channel of the 9-channel score map."""
    return bce_mean(z, resized_labels)


def system_loss(predictions: Sequence[Tensor], targets: Sequence) -> Tensor:
    """Mean over parts of the per-part BCE between fine scores and cropped labels."""
    if len(predictions) == 0:
        raise ValueError("system_loss: no part predictions")
    if len(predictions) != len(targets):
        raise ValueError("system_loss: predictions and targets differ in length")
    total = bce_mean(predictions[0], targets[0])
    for p, t in zip(predictions[1:], targets[1:]):
        total = total + bce_mean(p, t)
    return total * (1.0 / len(predictions))


def smooth_l1(theta: Tensor, theta_hat, weight=None) -> Tensor:
    """Mean over elements of 0.5 d^2 (|d| < 1) or |d| - 0.5 (otherwise).

    ``weight`` (broadcastable to theta) masks elements out, e.g. parts with
    no ground-truth centroid; the mean is then taken over the total weight.
    """
    th = theta_hat.data if isinstance(theta_hat, Tensor) else np.asarray(theta_hat)
    _check_same(theta, th, "smooth_l1")
    d = theta.data - th.astype(theta.dtype, copy=False)
    a = np.abs(d)
    small = a < 1
    per = np.where(small, 0.5 * d * d, a - 0.5)
    if weight is None:
        w = np.ones_like(d)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=d.dtype), d.shape)
    n = max(float(w.sum(dtype=np.float64)), 1.0)
    out = np.asarray((per * w).sum(dtype=np.float64) / n, dtype=theta.dtype)

    def bw(g):
        return (np.where(small, d, np.sign(d)) * w * (g / n),)

    return tensor_op(out, (theta,), bw, "smooth_l1")


def crop_part_targets(onehot: np.ndarray, theta, window: int) -> list[np.ndarray]:
    """Binary fine targets cropped from padded one-hot labels (B, 9, S, S).

    Labels are sampled with the same theta (treated as a constant), then
    thresholded at 0.5.  For each part the result is (B, 1 + k, h, w): a
    background channel followed by the part's k classes.
    """
    th = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    with no_grad():
        crops = crop_parts(Tensor(np.asarray(onehot, dtype=th.dtype)), Tensor(th), window).data
    binary = crops >= 0.5
    out = []
    for i, part in enumerate(PARTS):
        fg = binary[:, i, list(part.classes)]
        bg = ~fg.any(axis=1, keepdims=True)
        out.append(np.concatenate([bg, fg], axis=1).astype(th.dtype))
    return out
