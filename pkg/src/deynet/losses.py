"""Masked denoising loss, Dice loss and the ramped joint objective."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, ParameterError, ShapeError

DICE_EPS = 1e-5
RAMP_CONSTANT = 5.0


@dataclass(frozen=True)
class RampSchedule:
    w_max: float = 1.0
    ramp_epochs: int = 200
    shape: str = "gaussian"

    def __post_init__(self):
        if self.w_max < 0:
            raise ParameterError("w_max must be nonnegative")
        if self.ramp_epochs < 1:
            raise ParameterError("ramp_epochs must be >= 1")
        if self.shape != "gaussian":
            raise ParameterError(f"unsupported ramp shape {self.shape!r}")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def masked_mse(pred, plan):
    """Mean squared error between ``pred`` and the plan's original values at masked pixels only."""
    pred = _as_tensor(pred)
    if len(plan) == 0:
        return pred.new_zeros(()) if pred.is_floating_point() else torch.zeros((), dtype=torch.float64)
    if pred.ndim != 2:
        raise ShapeError(f"masked_mse expects a 2D prediction, got shape {tuple(pred.shape)}")
    idx = torch.as_tensor(plan.coords)
    target = torch.as_tensor(plan.originals).to(pred.dtype)
    diff = pred[idx[:, 0], idx[:, 1]] - target
    return (diff * diff).mean()


def dice_loss(probs, label, eps=DICE_EPS):
    """Smoothed soft Dice loss, averaged over leading batch items.

    2D inputs are treated as a single item; (N, ...) inputs produce the
    mean of N per-item losses.
    """
    probs = _as_tensor(probs)
    label = _as_tensor(label).to(probs.dtype)
    if probs.shape != label.shape:
        raise ShapeError(f"probs shape {tuple(probs.shape)} != label shape {tuple(label.shape)}")
    if probs.ndim == 2:
        probs, label = probs[None], label[None]
    p = probs.reshape(probs.shape[0], -1)
    g = label.reshape(label.shape[0], -1)
    inter = (p * g).sum(dim=1)
    dice = (2 * inter + eps) / (p.sum(dim=1) + g.sum(dim=1) + eps)
    return (1 - dice).mean()


def ramp_weight(t, sched):
    """Gaussian ramp-up ``w_max * exp(-5 (1 - t/T)^2)``, constant after ``T``."""
    if t < 0:
        raise ParameterError(f"t must be >= 0, got {t}")
    T = sched.ramp_epochs
    if t >= T:
        return float(sched.w_max)
    phase = 1.0 - t / T
    return float(sched.w_max) * math.exp(-RAMP_CONSTANT * phase * phase)


def w_max_from_counts(alpha, n_l, n_un):
    """Maximum unsupervised weight ``alpha * n_l / (n_l + n_un)``."""
    if n_l < 1 or n_un < 0:
        raise ParameterError(f"need n_l >= 1 and n_un >= 0, got {n_l}, {n_un}")
    return alpha * n_l / (n_l + n_un)


def joint_loss(
    seg_logits,
    labels,
    denoised,
    plans,
    t,
    sched,
    mode="denoise",
    labeled_flags=None,
    originals=None,
    dice_eps=DICE_EPS,
):
    """Combined objective ``l_seg + w(t) * l_de``.

    ``labels`` holds masks for the labeled items only (batch order).
    ``l_seg`` is the mean Dice loss over labeled items (0 if none);
    ``l_de`` is the mean per-slice masked MSE over all items, or in
    ``"reconstruct"`` mode the full-image MSE against ``originals``.
    Returns ``(total, l_seg, l_de)`` as tensors.
    """
    n = denoised.shape[0]
    flags = (
        torch.ones(n, dtype=torch.bool)
        if labeled_flags is None
        else torch.as_tensor(np.asarray(labeled_flags, dtype=bool))
    )
    n_lab = int(flags.sum())
    if n_lab:
        if labels is None or labels.shape[0] != n_lab:
            got = 0 if labels is None else labels.shape[0]
            raise DataError(f"{n_lab} labeled items but {got} labels supplied")
        probs = torch.sigmoid(seg_logits[flags])
        l_seg = dice_loss(probs, _as_tensor(labels).to(probs.dtype), dice_eps)
    else:
        l_seg = denoised.new_zeros(())

    if mode == "denoise":
        if plans is None or len(plans) != n:
            raise DataError("denoise mode needs one mask plan per batch item")
        l_de = torch.stack([masked_mse(denoised[i, 0], plans[i]) for i in range(n)]).mean()
    elif mode == "reconstruct":
        if originals is None:
            raise DataError("reconstruct mode needs the unmasked originals")
        target = _as_tensor(originals).to(denoised.dtype)
        l_de = ((denoised - target) ** 2).flatten(1).mean(dim=1).mean()
    else:
        raise ParameterError(f"unknown loss mode {mode!r}")

    w = ramp_weight(t, sched)
    return l_seg + w * l_de, l_seg, l_de
