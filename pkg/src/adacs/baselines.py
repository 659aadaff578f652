"""Comparison weighting schemes: AdaReg, AdaFrame, NLL and beta-NLL.

AdaReg and AdaFrame derive a per-pixel weight from residual statistics; the
weight is recomputed each step and treated as a constant when
differentiating. NLL and beta-NLL use a variance map predicted by a separate
estimator from the target and the warped source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .estimators import forward
from .field_core import check_same_grid
from .losses import LossValue, _check_disp, _prep, smoothness

log = logging.getLogger(__name__)


class DegenerateResidualError(ValueError):
    """All residuals are zero, so AdaReg's global residual scale is undefined."""


@dataclass(frozen=True)
class AdaRegConfig:
    c: float = 50.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"AdaReg c must be positive, got {self.c}")


@dataclass(frozen=True)
class AdaFrameConfig:
    a0: float = 0.1
    b0: float = 10.0
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0):
            raise ValueError("AdaFrame a0 and b0 must be positive")


def adareg_weight(target, warped, cfg=AdaRegConfig(), strict=True):
    """``exp(-c * rho / sigma)`` with ``sigma = 1 / mean(rho)``.

    With ``strict=False`` an all-zero residual yields a weight of one
    everywhere (logged) instead of raising.
    """
    target, warped = _prep(target, warped)
    rho = np.abs(target - warped)
    mean_rho = float(rho.mean())
    if mean_rho == 0.0:
        if strict:
            raise DegenerateResidualError("mean absolute residual is zero; AdaReg scale undefined")
        log.warning("AdaReg: zero residual, using unit weights")
        return np.ones_like(rho)
    sigma = 1.0 / mean_rho
    return np.exp(-cfg.c * rho / sigma)


def adaframe_weight(target, warped, cfg=AdaFrameConfig()):
    """``1 - sigmoid(a * rho - b)`` on the standardized absolute residual."""
    target, warped = _prep(target, warped)
    delta = np.abs(target - warped)
    mu = float(delta.mean())
    sd = float(delta.std())
    rho = (delta - mu) / math.sqrt(sd * sd + cfg.eps)
    a = cfg.a0 / (mu + cfg.eps)
    b = cfg.b0 * (1.0 - math.cos(math.pi * mu))
    # 1 - sigmoid(z) == sigmoid(-z); expit keeps the small tail nonzero longer
    return expit(-(a * rho - b))


def loss_adareg(target, warped, disp, lam, weight):
    """Mean squared residual plus the AdaReg-weighted smoothness term."""
    target, warped = _prep(target, warped)
    disp = _check_disp(target, disp)
    diff = warped - target
    n = diff.size
    reg, g_disp = smoothness(disp, weight)
    return LossValue(float(np.sum(diff * diff)) / n + lam * reg,
                     {"warped": (2.0 / n) * diff, "disp": lam * g_disp})


def loss_adaframe(target, warped, disp, lam, weight):
    """AdaFrame-weighted squared residual plus plain smoothness."""
    target, warped = _prep(target, warped)
    disp = _check_disp(target, disp)
    diff = warped - target
    n = diff.size
    reg, g_disp = smoothness(disp)
    return LossValue(float(np.sum(weight * diff * diff)) / n + lam * reg,
                     {"warped": (2.0 / n) * weight * diff, "disp": lam * g_disp})


def forward_variance(params, spec, tgt, warped):
    """Predict ``sigma^2 = exp(raw)`` from (target, warped source).

    Returns the variance map and the estimator cache; the adjoint passed to
    :func:`adacs.estimators.backward` is the one w.r.t. the log-variance.
    """
    if spec.head != "logvar":
        raise ValueError(f"variance estimator needs a logvar head, got {spec.head!r}")
    raw, cache = forward(params, spec, [tgt, warped])
    return np.exp(raw[..., 0, :, :]), cache


def loss_nll(target, warped, var):
    """Heteroscedastic Gaussian NLL: ``mean(r / var + log var)``.

    Adjoints are w.r.t. ``warped`` and the log-variance ``log(var)``.
    """
    target, warped = _prep(target, warped)
    var = np.asarray(var, dtype=np.float64)
    check_same_grid(target, var, names=("target", "var"))
    diff = warped - target
    r = diff * diff
    n = r.size
    inv = 1.0 / var
    value = float(np.sum(r * inv + np.log(var))) / n
    return LossValue(value, {"warped": (2.0 / n) * diff * inv, "log_var": (1.0 - r * inv) / n})


def loss_beta_nll(target, warped, var, beta=0.5):
    """NLL scaled per pixel by a stop-gradient ``var ** beta``."""
    target, warped = _prep(target, warped)
    var = np.asarray(var, dtype=np.float64)
    check_same_grid(target, var, names=("target", "var"))
    scale = var**beta
    diff = warped - target
    r = diff * diff
    n = r.size
    inv = 1.0 / var
    value = float(np.sum(scale * (r * inv + np.log(var)))) / n
    return LossValue(value, {
        "warped": (2.0 / n) * scale * diff * inv,
        "log_var": scale * (1.0 - r * inv) / n,
    })
