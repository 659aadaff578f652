"""Registration and scoring objectives with explicit adjoints.

Every loss returns a :class:`LossValue` holding the scalar and a dict of
adjoints keyed by input name. Inputs that are stop-gradient by contract
(the score in :func:`loss_de`, the warped image in :func:`loss_scs` and
:func:`loss_se`) never appear in ``grads``.

Means are taken over every pixel of every pair in the batch, so a batch loss
equals the average of the per-pair losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .field_core import (
    InvariantError,
    as_score,
    check_same_grid,
    spatial_gradient,
    spatial_gradient_adjoint,
)

GAMMA = 0.99


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MomentumState:
    m: float = 0.0
    gamma: float = GAMMA


@dataclass(frozen=True)
class ScoringWeights:
    alpha: float = 0.1
    beta: float = 0.05
    lam: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvariantError(f"{name} must be finite and >= 0, got {v}")


def _prep(target, warped):
    target = np.asarray(target, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    check_same_grid(target, warped, names=("target", "warped"))
    if target.shape != warped.shape:
        raise InvariantError(f"target {target.shape} and warped {warped.shape} differ")
    return target, warped


def smoothness(disp, weight=None):
    """Mean over pixels of the squared forward differences of both channels.

    ``weight`` is an optional per-pixel map applied inside the norm, i.e. the
    penalty becomes ``weight**2 * |grad u|**2``. Returns ``(value, adjoint)``.
    """
    disp = np.asarray(disp, dtype=np.float64)
    gx, gy = spatial_gradient(disp)
    n = disp.size // 2
    if weight is None:
        value = float(np.sum(gx * gx + gy * gy)) / n
        grad = spatial_gradient_adjoint(2.0 * gx, 2.0 * gy) / n
        return value, grad
    w2 = np.expand_dims(np.asarray(weight, dtype=np.float64) ** 2, -3)
    value = float(np.sum(w2 * (gx * gx + gy * gy))) / n
    grad = spatial_gradient_adjoint(2.0 * w2 * gx, 2.0 * w2 * gy) / n
    return value, grad


def _check_disp(target, disp):
    disp = np.asarray(disp, dtype=np.float64)
    if disp.shape[:-3] + disp.shape[-2:] != target.shape or disp.shape[-3] != 2:
        raise InvariantError(
            f"displacement {disp.shape} does not match image {target.shape}"
        )
    return disp


def loss_de(target, warped, disp, score, lam):
    """Score-weighted reconstruction error plus displacement smoothness.

    ``score`` is treated as a constant; adjoints are returned for ``warped``
    and ``disp`` only.
    """
    target, warped = _prep(target, warped)
    disp = _check_disp(target, disp)
    score = as_score(score)
    check_same_grid(target, score, names=("target", "score"))
    score = np.broadcast_to(score, target.shape)
    diff = warped - target
    n = diff.size
    data = float(np.sum(score * diff * diff)) / n
    g_warped = (2.0 / n) * score * diff
    reg, g_disp = smoothness(disp)
    return LossValue(data + lam * reg, {"warped": g_warped, "disp": lam * g_disp})


def loss_baseline(target, warped, disp, lam):
    """Plain mean squared reconstruction error plus displacement smoothness."""
    target, warped = _prep(target, warped)
    disp = _check_disp(target, disp)
    diff = warped - target
    n = diff.size
    data = float(np.sum(diff * diff)) / n
    g_warped = (2.0 / n) * diff
    reg, g_disp = smoothness(disp)
    return LossValue(data + lam * reg, {"warped": g_warped, "disp": lam * g_disp})


def loss_scs(target, warped, score):
    """Score-weighted residual; only the score receives an adjoint."""
    target, warped = _prep(target, warped)
    score = np.asarray(score, dtype=np.float64)
    check_same_grid(target, score, names=("target", "score"))
    r = (target - warped) ** 2
    n = r.size
    return LossValue(float(np.sum(score * r)) / n, {"score": r / n})


def loss_reg(score):
    """Penalty pulling the score map away from the all-zero solution."""
    score = np.asarray(score, dtype=np.float64)
    n = score.size
    gap = 1.0 - score
    return LossValue(float(np.sum(gap * gap)) / n, {"score": -2.0 * gap / n})


def mean_residual(target, warped):
    target, warped = _prep(target, warped)
    return float(np.mean((target - warped) ** 2))


def cosine_activation(mu):
    """Map a mean residual in [0, 1] to ``cos(pi/2 * mu)``."""
    if not (0.0 <= mu <= 1.0):
        raise InvariantError(f"mean residual must lie in [0, 1], got {mu}")
    return math.cos(0.5 * math.pi * mu)


def ema_update(state, b):
    if not (0.0 <= b <= 1.0):
        raise InvariantError(f"activation must lie in [0, 1], got {b}")
    m = state.gamma * state.m + (1.0 - state.gamma) * b
    return MomentumState(m=min(max(m, 0.0), 1.0), gamma=state.gamma)


def loss_tv(score, m):
    """Momentum-weighted total variation (squared forward differences) of the score."""
    if not (0.0 <= m <= 1.0):
        raise InvariantError(f"momentum must lie in [0, 1], got {m}")
    score = np.asarray(score, dtype=np.float64)
    gx, gy = spatial_gradient(score)
    n = score.size
    value = m * float(np.sum(gx * gx + gy * gy)) / n
    grad = (m / n) * spatial_gradient_adjoint(2.0 * gx, 2.0 * gy)
    return LossValue(value, {"score": grad})


def loss_se(target, warped, score, weights, m):
    """Full scoring-estimator objective: scs + alpha * reg + beta * tv."""
    scs = loss_scs(target, warped, score)
    reg = loss_reg(score)
    tv = loss_tv(score, m)
    value = scs.value + weights.alpha * reg.value + weights.beta * tv.value
    grad = (
        scs.grads["score"]
        + weights.alpha * reg.grads["score"]
        + weights.beta * tv.grads["score"]
    )
    return LossValue(value, {"score": grad})
