"""
Training objective: l2 loss on the root confidence map, smooth-l1 loss on
the displacement maps, summed over stages with weight beta on the
displacement term.  Every loss returns (value, gradient w.r.t. prediction).
Losses are means over the supervised elements so beta does not depend on
the map resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MASKED = "masked"
UNMASKED = "unmasked"


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.01
    smooth_l1_delta: float = 1.0
    mask_mode: str = MASKED

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive, got {0}".format(self.beta))
        if not self.smooth_l1_delta > 0:
            raise ValueError("smooth_l1_delta must be positive, got {0}".format(self.smooth_l1_delta))
        if self.mask_mode not in (MASKED, UNMASKED):
            raise ValueError("mask_mode must be 'masked' or 'unmasked', got '{0}'".format(self.mask_mode))


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def l2_conf_loss(pred, target):
    """
    Mean squared error over all cells.
    :return: (value, gradient with the shape of pred)
    """
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise DataError("Confidence shapes differ: {0} vs {1}".format(p.shape, t.shape))
    r = p - t
    n = r.size
    return float(np.sum(r * r) / n), 2.0 * r / n


def smooth_l1(r, delta):
    """Elementwise smooth-l1 and its derivative."""
    a = np.abs(r)
    quad = a < delta
    value = np.where(quad, 0.5 * r * r / delta, a - 0.5 * delta)
    slope = np.where(quad, r / delta, np.sign(r))
    return value, slope


def smooth_l1_disp_loss(pred, target, mask=None, cfg=None):
    """
    Smooth-l1 over the masked displacement components, averaged.

    mask is a boolean array over components (H, W, d*K) or over joint
    channels (H, W, K); when omitted it comes from cfg.mask_mode and the
    target's defined cells.  An empty mask gives value 0.
    """
    cfg = cfg or LossConfig()
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise DataError("Displacement shapes differ: {0} vs {1}".format(p.shape, t.shape))
    mask = _component_mask(mask, target, p.shape, cfg)
    n = int(mask.sum())
    grad = np.zeros_like(p)
    if n == 0:
        return 0.0, grad
    value, slope = smooth_l1(p - t, cfg.smooth_l1_delta)
    grad[mask] = slope[mask] / n
    return float(value[mask].sum() / n), grad


def _component_mask(mask, target, shape, cfg):
    if mask is None:
        if cfg.mask_mode == UNMASKED or not hasattr(target, "component_mask"):
            return np.ones(shape, dtype=bool)
        return target.component_mask()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == shape:
        return mask
    if mask.ndim == 3 and mask.shape[:2] == shape[:2] and shape[2] % mask.shape[2] == 0:
        return np.repeat(mask, shape[2] // mask.shape[2], axis=2)
    raise DataError("Mask shape {0} does not fit displacement shape {1}".format(mask.shape, shape))


def total_loss(stage_preds, targets, cfg=None, stage_weights=None):
    """
    Sum over stages of L_conf + beta * L_disp, every stage supervised
    against the same targets.
    :param stage_preds: list of (confidence, displacement) predictions
    :param targets: (ConfidenceMap, DisplacementMapStack)
    :param stage_weights: optional per-stage multipliers (1 by default)
    :return: (value, list of (conf gradient, displacement gradient))
    """
    cfg = cfg or LossConfig()
    if not stage_preds:
        raise ValueError("total_loss needs at least one stage")
    weights = stage_weights if stage_weights is not None else [1.0] * len(stage_preds)
    conf_target, disp_target = targets
    mask = _component_mask(None, disp_target, _values(disp_target).shape, cfg)
    total, grads = 0.0, []
    for (conf, disp), w in zip(stage_preds, weights):
        lc, gc = l2_conf_loss(conf, conf_target)
        ld, gd = smooth_l1_disp_loss(disp, disp_target, mask, cfg)
        total += w * (lc + cfg.beta * ld)
        grads.append((w * gc, w * cfg.beta * gd))
    return total, grads


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn, x, step=1e-5, indices=None, floor=1e-8):
    """
    Compare an analytic gradient with central finite differences.
    :param loss_fn: callable x -> (value, gradient)
    :param x: float64 input array (not modified)
    :param indices: optional flat indices to check, all components otherwise
    :return: max relative error over the checked components
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    _, grad = loss_fn(x)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    flat = x.ravel()
    picked = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in picked:
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn(x)[0]
        flat[i] = orig - step
        minus = loss_fn(x)[0]
        flat[i] = orig
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(grad[i], numeric, floor))
    return worst
