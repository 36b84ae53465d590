"""Jaccard, focal and truncated global balancing losses with analytic gradients.

All functions take superpixel probabilities ``p`` and binary targets ``q``
as arrays of shape (K, 5) (or flat vectors for the single-class ``jal``)
and return plain floats; each ``*_grad`` companion returns dL/dp with the
shape of ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import _emit

NUM_CLASSES = 5
P_MIN = 1e-7

# reference foreground pixel ratios (%) in class order
REFERENCE_PIXEL_RATIO = (13.70, 0.67, 1.27, 3.09, 0.42)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    theta: float = 0.2
    class_weights: tuple = field(default=(1.0,) * NUM_CLASSES)
    epsilon: float = 1e-6
    micro_weight: float = 0.5
    macro_weight: float = 0.5
    cel_weight: float = 0.5
    jal_weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if not 0 <= self.theta < 1:
            raise ConfigurationError("theta must lie in [0, 1)")
        if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) <= 0:
            raise ConfigurationError("class_weights needs 5 positive values")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")


def inverse_ratio_weights(ratios=REFERENCE_PIXEL_RATIO):
    """Class weights proportional to 1 / pixel ratio, normalized to mean 1."""
    inv = 1.0 / np.asarray(ratios, dtype=np.float64)
    return tuple(inv / inv.mean())


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigurationError(f"prediction shape {p.shape} != target shape {q.shape}")
    return p, q


# ---------------------------------------------------------------------------
# Jaccard family


def jal(p, q, eps=1e-6):
    p, q = _pair(p, q)
    return float(1.0 - (np.sum(p * q) + eps) / (np.sum(p * p) + np.sum(q * q) + eps))


def jal_grad(p, q, eps=1e-6):
    p, q = _pair(p, q)
    num = np.sum(p * q) + eps
    den = np.sum(p * p) + np.sum(q * q) + eps
    return -(q * den - 2.0 * p * num) / den ** 2


def jal_macro(p, q, eps=1e-6):
    p, q = _pair(p, q)
    return float(np.mean([jal(p[:, k], q[:, k], eps) for k in range(p.shape[1])]))


def jal_macro_grad(p, q, eps=1e-6):
    p, q = _pair(p, q)
    g = np.stack([jal_grad(p[:, k], q[:, k], eps) for k in range(p.shape[1])], axis=1)
    return g / p.shape[1]


def jal_micro(p, q, eps=1e-6):
    return jal(p, q, eps)


def jal_micro_grad(p, q, eps=1e-6):
    return jal_grad(p, q, eps)


def gbjal(p, q, config=LossConfig()):
    return (config.micro_weight * jal_micro(p, q, config.epsilon)
            + config.macro_weight * jal_macro(p, q, config.epsilon))


def gbjal_grad(p, q, config=LossConfig()):
    return (config.micro_weight * jal_micro_grad(p, q, config.epsilon)
            + config.macro_weight * jal_macro_grad(p, q, config.epsilon))


# ---------------------------------------------------------------------------
# Focal / truncated cross entropy


def focal(p_t, gamma):
    """-(1 - p_t)^gamma * log(p_t), elementwise; positive."""
    p_t = np.clip(np.asarray(p_t, dtype=np.float64), P_MIN, 1.0)
    out = -np.power(1.0 - p_t, gamma) * np.log(p_t)
    return float(out) if out.ndim == 0 else out


def focal_grad(p_t, gamma):
    """d focal / d p_t."""
    p_t = np.clip(np.asarray(p_t, dtype=np.float64), P_MIN, 1.0)
    one_m = 1.0 - p_t
    log_p = np.log(p_t)
    safe = np.where(one_m > 0, one_m, 1.0)
    # gamma * (1-p)^(gamma-1) * log p, which tends to 0 as p -> 1 for gamma > 0
    first = np.where(one_m > 0, gamma * np.power(safe, gamma - 1.0) * log_p, 0.0) if gamma else 0.0
    out = first - np.power(one_m, gamma) / p_t
    return float(out) if np.ndim(out) == 0 else out


def truncated_focal(p_t, gamma, theta):
    """Per-term truncated loss as a function of p_t."""
    p_t = np.clip(np.asarray(p_t, dtype=np.float64), P_MIN, 1.0)
    upper = focal(p_t, gamma)
    if theta <= 0:
        return upper
    lower = focal(theta, gamma) + 0.5 * (1.0 - p_t ** 2 / theta ** 2)
    out = np.where(p_t < theta, lower, upper)
    return float(out) if out.ndim == 0 else out


def truncated_focal_grad(p_t, gamma, theta):
    raw = np.asarray(p_t, dtype=np.float64)
    p_t = np.clip(raw, P_MIN, 1.0)
    upper = focal_grad(p_t, gamma)
    out = upper if theta <= 0 else np.where(p_t < theta, -p_t / theta ** 2, upper)
    out = np.where((raw < P_MIN) | (raw > 1.0), 0.0, out)
    return float(out) if out.ndim == 0 else out


def _p_t(p, q):
    return np.where(q >= 0.5, p, 1.0 - p), np.where(q >= 0.5, 1.0, -1.0)


def gbcel(p, q, config=LossConfig()):
    p, q = _pair(p, q)
    pt, _ = _p_t(p, q)
    w = np.asarray(config.class_weights)
    terms = truncated_focal(pt, config.gamma, config.theta) * w
    return float(np.mean(terms))


def gbcel_grad(p, q, config=LossConfig()):
    p, q = _pair(p, q)
    pt, sign = _p_t(p, q)
    w = np.asarray(config.class_weights)
    return truncated_focal_grad(pt, config.gamma, config.theta) * sign * w / p.size


def cross_entropy(p, q):
    p, q = _pair(p, q)
    pt, _ = _p_t(p, q)
    return float(np.mean(-np.log(np.clip(pt, P_MIN, 1.0))))


def cross_entropy_grad(p, q):
    p, q = _pair(p, q)
    pt, sign = _p_t(p, q)
    g = np.where(pt < P_MIN, 0.0, -1.0 / np.clip(pt, P_MIN, 1.0))
    return g * sign / p.size


# ---------------------------------------------------------------------------
# Combined objectives


def baseline_ce_jal(p, q, config=LossConfig()):
    return (config.cel_weight * cross_entropy(p, q)
            + config.jal_weight * jal_macro(p, q, config.epsilon))


def baseline_ce_jal_grad(p, q, config=LossConfig()):
    return (config.cel_weight * cross_entropy_grad(p, q)
            + config.jal_weight * jal_macro_grad(p, q, config.epsilon))


def total_loss(p, q, config=LossConfig()):
    return config.cel_weight * gbcel(p, q, config) + config.jal_weight * gbjal(p, q, config)


def total_loss_grad(p, q, config=LossConfig()):
    return config.cel_weight * gbcel_grad(p, q, config) + config.jal_weight * gbjal_grad(p, q, config)


def total_loss_and_grad(p, q, config=LossConfig()):
    """Return ``(total, grad, {"gbcel": ..., "gbjal": ...})``."""
    ce = gbcel(p, q, config)
    ja = gbjal(p, q, config)
    total = config.cel_weight * ce + config.jal_weight * ja
    return total, total_loss_grad(p, q, config), {"gbcel": ce, "gbjal": ja}


def loss_curve(gamma, theta, points):
    """Loss and its derivative along a grid of p_t values."""
    pts = np.asarray(points, dtype=np.float64)
    return truncated_focal(pts, gamma, theta), truncated_focal_grad(pts, gamma, theta)


def loss_node(p, value_fn, grad_fn, *args):
    """Record ``value_fn(p.data, *args)`` as a scalar op on the active graph."""
    value = np.array(value_fn(p.data, *args), dtype=p.dtype)
    return _emit(
        getattr(value_fn, "__name__", "loss"),
        value,
        (p,),
        lambda g: (g * np.asarray(grad_fn(p.data, *args), dtype=p.dtype),),
    )
