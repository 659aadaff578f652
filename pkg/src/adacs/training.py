"""Warm-up plus alternating optimization of the displacement and scoring estimators.

Per batch, the displacement estimator is stepped on the score-weighted loss
with the score held constant; then, in score-active epochs, the displacement
is recomputed with the updated parameters and the scoring estimator is
stepped with the displacement held constant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import baselines as bl
from .estimators import (
    EstimatorSpec, NonFiniteError, OptimState, backward, backward_score,
    forward_displacement, forward_score, init_params, optimizer_step,
)
from .field_core import warp_bilinear, warp_bilinear_with_grad, warp_nearest
from .losses import (
    MomentumState, ScoringWeights, cosine_activation, ema_update, loss_de,
    loss_se, mean_residual, smoothness,
)
from .metrics import dice

log = logging.getLogger(__name__)

METHODS = ("none", "adacs", "adareg", "adaframe", "nll", "beta-nll")
HISTORY_COLUMNS = ("epoch", "L_de", "L_se", "mu", "b", "m", "val_dice", "mean_s")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    warmup: int = 50
    eta: float = 1e-3
    lam: float = 0.01
    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.99
    method: str = "adacs"
    batch_size: int = 4
    seed: int = 0
    estimator: str = "conv"
    width: int = 8
    depth: int = 2
    score_width: int = 8
    nll_beta: float = 0.5
    # a slower scoring estimator avoids sigmoid saturation at S == 1
    score_eta: float = 3e-4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if not (0 <= self.warmup <= self.epochs):
            raise ValueError(f"need 0 <= warmup <= epochs, got warmup={self.warmup}, epochs={self.epochs}")
        if not (self.eta > 0 and self.score_eta > 0 and self.batch_size > 0 and 0 < self.gamma < 1):
            raise ValueError("learning rates and batch size must be positive and gamma in (0, 1)")
        ScoringWeights(self.alpha, self.beta, self.lam)

    @property
    def weights(self):
        return ScoringWeights(self.alpha, self.beta, self.lam)


class PhaseFlags(NamedTuple):
    flag_disp: bool
    flag_score: bool


def phase_for_epoch(i, warmup):
    if i < warmup:
        return PhaseFlags(True, False)
    if i < 2 * warmup:
        return PhaseFlags(False, True)
    return PhaseFlags(True, True)


def estimator_specs(cfg, shape):
    """Displacement, score and variance estimator specs for a config."""
    if cfg.estimator == "direct":
        return (
            EstimatorSpec("direct", 2, head="displacement", shape=tuple(shape)),
            EstimatorSpec("direct", 1, head="score", shape=tuple(shape)),
            EstimatorSpec("direct", 2, head="logvar", shape=tuple(shape)),
        )
    return (
        EstimatorSpec("conv", 2, cfg.width, cfg.depth, "displacement"),
        EstimatorSpec("conv", 1, cfg.score_width, cfg.depth, "score"),
        EstimatorSpec("conv", 2, cfg.score_width, cfg.depth, "logvar"),
    )


@dataclass
class Estimator:
    spec: EstimatorSpec
    params: object
    opt: OptimState


@dataclass
class TrainState:
    disp: Estimator
    score: Estimator | None = None
    var: Estimator | None = None
    momentum: MomentumState = field(default_factory=MomentumState)
    step: int = 0


def init_state(cfg, shape):
    """Fresh estimators for ``cfg.method``; no scoring estimator unless AdaCS."""
    d_spec, s_spec, v_spec = estimator_specs(cfg, shape)
    state = TrainState(
        Estimator(d_spec, init_params(d_spec, cfg.seed), OptimState(lr=cfg.eta)),
        momentum=MomentumState(0.0, cfg.gamma),
    )
    if cfg.method == "adacs":
        state.score = Estimator(s_spec, init_params(s_spec, cfg.seed + 1), OptimState(lr=cfg.score_eta))
    elif cfg.method in ("nll", "beta-nll"):
        state.var = Estimator(v_spec, init_params(v_spec, cfg.seed + 2), OptimState(lr=cfg.eta))
    return state


def _finite(value, what):
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {what}: {value}")
    return value


def _per_pair(fn, tgt, warped):
    return np.stack([fn(t, w) for t, w in zip(tgt, warped)])


def _disp_step(state, cfg, src, tgt, use_score):
    est = state.disp
    u, cache = forward_displacement(est.params, est.spec, src, tgt)
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite displacement estimate")
    warped, d_dx, d_dy = warp_bilinear_with_grad(src, u)
    method = cfg.method
    if method in ("none", "adacs"):
        if use_score:
            score, _ = forward_score(state.score.params, state.score.spec, tgt)
        else:
            score = np.ones_like(tgt)
        loss = loss_de(tgt, warped, u, score, cfg.lam)
    elif method == "adareg":
        weight = _per_pair(lambda t, w: bl.adareg_weight(t, w, strict=False), tgt, warped)
        loss = bl.loss_adareg(tgt, warped, u, cfg.lam, weight)
    elif method == "adaframe":
        weight = _per_pair(bl.adaframe_weight, tgt, warped)
        loss = bl.loss_adaframe(tgt, warped, u, cfg.lam, weight)
    else:
        var_est = state.var
        var, vcache = bl.forward_variance(var_est.params, var_est.spec, tgt, warped)
        if method == "nll":
            loss = bl.loss_nll(tgt, warped, var)
        else:
            loss = bl.loss_beta_nll(tgt, warped, var, cfg.nll_beta)
        reg, g_reg = smoothness(u)
        loss.value += cfg.lam * reg
        loss.grads["disp"] = cfg.lam * g_reg
        backward(var_est.params, var_est.spec, vcache, np.expand_dims(loss.grads["log_var"], -3))
        optimizer_step(var_est.params, var_est.opt)
    _finite(loss.value, "displacement loss")
    gw = loss.grads["warped"]
    adj = loss.grads["disp"] + np.stack([gw * d_dx, gw * d_dy], axis=-3)
    backward(est.params, est.spec, cache, adj)
    optimizer_step(est.params, est.opt)
    return loss.value, mean_residual(tgt, warped)


def _score_step(state, cfg, src, tgt):
    u, _ = forward_displacement(state.disp.params, state.disp.spec, src, tgt)
    warped = warp_bilinear(src, u)
    est = state.score
    score, cache = forward_score(est.params, est.spec, tgt)
    mu = mean_residual(tgt, warped)
    b = cosine_activation(min(mu, 1.0))
    state.momentum = ema_update(state.momentum, b)
    loss = loss_se(tgt, warped, score, cfg.weights, state.momentum.m)
    _finite(loss.value, "scoring loss")
    backward_score(est.params, est.spec, cache, loss.grads["score"])
    optimizer_step(est.params, est.opt)
    return loss.value, mu, float(score.mean())


def train_step(state, cfg, src, tgt, flags):
    """One Alg.-1 iteration on a batch; mutates ``state`` and returns step metrics."""
    out = {"L_de": math.nan, "L_se": math.nan, "mu": math.nan, "mean_s": math.nan}
    if flags.flag_disp:
        out["L_de"], out["mu"] = _disp_step(state, cfg, src, tgt, flags.flag_score)
    if flags.flag_score:
        out["L_se"], out["mu"], out["mean_s"] = _score_step(state, cfg, src, tgt)
    out["b"] = cosine_activation(min(out["mu"], 1.0))
    out["m"] = state.momentum.m
    state.step += 1
    return out


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: r[k] for k in HISTORY_COLUMNS})


@dataclass
class TrainResult:
    state: TrainState
    history: TrainHistory
    best_disp: object
    best_epoch: int
    best_val_dice: float

    @property
    def params_disp(self):
        return self.state.disp.params

    @property
    def params_score(self):
        return None if self.state.score is None else self.state.score.params


def stack_pairs(pairs):
    src = np.stack([p.src for p in pairs])
    tgt = np.stack([p.tgt for p in pairs])
    return src, tgt


def validation_dice(params, spec, pairs):
    if not pairs or any(p.mask_s is None or p.mask_t is None for p in pairs):
        return math.nan
    src, tgt = stack_pairs(pairs)
    u, _ = forward_displacement(params, spec, src, tgt)
    warped = warp_nearest(np.stack([p.mask_s for p in pairs]), u)
    return float(np.mean([dice(w, p.mask_t) for w, p in zip(warped, pairs)]))


def run_training(cfg, train, val=(), callback=None):
    """Train on ``train`` pairs; keep the displacement parameters with best val Dice.

    ``callback(epoch, state, record)`` runs after every epoch.
    """
    if not train:
        raise ValueError("training set is empty")
    shape = train[0].src.shape
    state = init_state(cfg, shape)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best = (-math.inf, -1, state.disp.params.copy())
    for epoch in range(cfg.epochs):
        flags = phase_for_epoch(epoch, cfg.warmup) if cfg.method == "adacs" else PhaseFlags(True, False)
        order = rng.permutation(len(train))
        sums = {"L_de": [], "L_se": [], "mu": [], "mean_s": []}
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train[k] for k in order[start:start + cfg.batch_size]]
            src, tgt = stack_pairs(batch)
            try:
                metrics = train_step(state, cfg, src, tgt, flags)
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch} batch {bi}: {exc}") from exc
            for k in sums:
                sums[k].append(metrics[k])
        mu = float(np.mean(sums["mu"]))
        record = {
            "epoch": epoch,
            "L_de": float(np.mean(sums["L_de"])),
            "L_se": float(np.mean(sums["L_se"])),
            "mu": mu,
            "b": cosine_activation(min(mu, 1.0)),
            "m": state.momentum.m,
            "val_dice": validation_dice(state.disp.params, state.disp.spec, list(val)),
            "mean_s": float(np.mean(sums["mean_s"])),
        }
        history.records.append(record)
        if flags.flag_disp:
            vd = record["val_dice"]
            # without validation pairs the latest parameters are kept
            if math.isnan(vd) or vd > best[0] or best[1] < 0:
                best = (vd if not math.isnan(vd) else -math.inf, epoch, state.disp.params.copy())
        if callback is not None:
            callback(epoch, state, record)
        log.debug("epoch %d %s", epoch, record)
    best_score, best_epoch, best_params = best
    return TrainResult(state, history, best_params, best_epoch,
                       best_score if best_score > -math.inf else math.nan)


def config_dict(cfg):
    return asdict(cfg)


def fit_score(est, tgt, warped, weights, steps, m=0.0):
    """Train a scoring estimator alone on fixed residuals; returns mean score per step."""
    trace = np.empty(steps)
    for k in range(steps):
        score, cache = forward_score(est.params, est.spec, tgt)
        loss = loss_se(tgt, warped, score, weights, m)
        backward_score(est.params, est.spec, cache, loss.grads["score"])
        optimizer_step(est.params, est.opt)
        trace[k] = score.mean()
    return trace
