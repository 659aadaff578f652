"""Finite-difference audits of every hand-written adjoint in the package.

Each check draws random 16x16 instances, evaluates the analytic gradient and
compares it against central differences. The error measure is
``max|analytic - numeric| / max|numeric|``, so entries whose true gradient
is near zero do not blow up the ratio through round-off.

Leaky ReLU and the integer cell lookup of the bilinear warp make some losses
piecewise smooth. When a stencil straddles such a kink, the forward and
backward one-sided differences disagree and the central difference is the
average of two valid derivatives, which no adjoint can match. Those
coordinates are compared against the nearer one-sided difference instead,
so a wrong adjoint still fails there, and they are counted in ``kinks``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines as bl
from .estimators import EstimatorSpec, backward, forward, init_params
from .field_core import warp_bilinear, warp_bilinear_vjp, warp_bilinear_with_grad
from .losses import (
    loss_baseline, loss_de, loss_reg, loss_scs, loss_se, loss_tv, smoothness,
    ScoringWeights,
)

SIZE = 16
DEFAULT_TOL = 1e-5
DEFAULT_STEP = 1e-6
COMPOSED_TOL_FACTOR = 10.0
# one-sided slopes further apart than this (relative to the gradient scale) mark a kink
KINK_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    instances: int
    kinks: int = 0

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


def numeric_gradient(f, x, step=DEFAULT_STEP, index=None):
    """Central differences of scalar ``f`` at ``x``.

    With ``index`` (flat positions) only those entries are differenced and a
    1D array is returned; otherwise the full gradient in the shape of ``x``.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = []
    for i in positions:
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        out.append((hi - lo) / (2.0 * step))
    out = np.asarray(out)
    return out.reshape(x.shape) if index is None else out


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _one_sided(f, x, step, index):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    f0 = f(x)
    fwd, bwd = [], []
    for i in index:
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        fwd.append((hi - f0) / step)
        bwd.append((f0 - lo) / step)
    return np.asarray(fwd), np.asarray(bwd)


def check_gradient(f, grad, x, step=DEFAULT_STEP, index=None, return_kinks=False):
    """Relative error between ``grad`` (analytic, at ``x``) and finite differences of ``f``.

    ``return_kinks`` also returns the number of coordinates judged to sit on a kink.
    """
    size = np.size(x)
    index = np.arange(size) if index is None else np.asarray(index)
    fwd, bwd = _one_sided(f, x, step, index)
    ana = np.asarray(grad, dtype=np.float64).reshape(-1)[index]
    num = 0.5 * (fwd + bwd)
    scale = max(float(np.abs(num).max(initial=0.0)), float(np.abs(ana).max(initial=0.0)), 1e-300)
    kinked = np.abs(fwd - bwd) > KINK_TOL * scale
    nearer = np.where(np.abs(fwd - ana) < np.abs(bwd - ana), fwd, bwd)
    num = np.where(kinked, nearer, num)
    err = relative_error(ana, num)
    return (err, int(kinked.sum())) if return_kinks else err


# -- random instances -----------------------------------------------------------------

def _image(rng):
    return rng.uniform(0.0, 1.0, size=(SIZE, SIZE))


def _smooth_image(rng):
    # bilinear warps of smooth sources keep curvature, and so FD error, small
    from scipy.ndimage import gaussian_filter
    return np.clip(0.5 + 2.0 * gaussian_filter(rng.normal(size=(SIZE, SIZE)), 1.5), 0.0, 1.0)


def _disp(rng, scale=2.0):
    return rng.uniform(-scale, scale, size=(2, SIZE, SIZE))


def _score(rng):
    return rng.uniform(0.05, 0.95, size=(SIZE, SIZE))


# -- individual checks: each returns the relative error for one instance --------------

def _warp_disp(rng, step):
    src, u, g = _smooth_image(rng), _disp(rng), rng.normal(size=(SIZE, SIZE))
    return check_gradient(lambda d: float(np.sum(warp_bilinear(src, d) * g)),
                          warp_bilinear_vjp(src, u, g), u, step, return_kinks=True)


def _smoothness(rng, step):
    u = _disp(rng)
    return check_gradient(lambda d: smoothness(d)[0], smoothness(u)[1], u, step)


def _baseline(rng, step):
    t, w, u = _image(rng), _image(rng), _disp(rng)
    lv = loss_baseline(t, w, u, 0.3)
    e1 = check_gradient(lambda x: loss_baseline(t, x, u, 0.3).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: loss_baseline(t, w, x, 0.3).value, lv.grads["disp"], u, step)
    return max(e1, e2)


def _de(rng, step):
    t, w, u, s = _image(rng), _image(rng), _disp(rng), _score(rng)
    lv = loss_de(t, w, u, s, 0.3)
    e1 = check_gradient(lambda x: loss_de(t, x, u, s, 0.3).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: loss_de(t, w, x, s, 0.3).value, lv.grads["disp"], u, step)
    return max(e1, e2)


def _scs(rng, step):
    t, w, s = _image(rng), _image(rng), _score(rng)
    return check_gradient(lambda x: loss_scs(t, w, x).value, loss_scs(t, w, s).grads["score"], s, step)


def _reg(rng, step):
    s = _score(rng)
    return check_gradient(lambda x: loss_reg(x).value, loss_reg(s).grads["score"], s, step)


def _tv(rng, step):
    s, m = _score(rng), float(rng.uniform(0.1, 1.0))
    return check_gradient(lambda x: loss_tv(x, m).value, loss_tv(s, m).grads["score"], s, step)


def _se(rng, step):
    t, w, s = _image(rng), _image(rng), _score(rng)
    wts = ScoringWeights(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), 0.01)
    m = float(rng.uniform(0, 1))
    return check_gradient(lambda x: loss_se(t, w, x, wts, m).value,
                          loss_se(t, w, s, wts, m).grads["score"], s, step)


def _adareg(rng, step):
    t, w, u = _image(rng), _image(rng), _disp(rng)
    a = bl.adareg_weight(t, w)
    lv = bl.loss_adareg(t, w, u, 0.3, a)
    e1 = check_gradient(lambda x: bl.loss_adareg(t, x, u, 0.3, a).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: bl.loss_adareg(t, w, x, 0.3, a).value, lv.grads["disp"], u, step)
    return max(e1, e2)


def _adaframe(rng, step):
    t, w, u = _image(rng), _image(rng), _disp(rng)
    a = bl.adaframe_weight(t, w)
    lv = bl.loss_adaframe(t, w, u, 0.3, a)
    e1 = check_gradient(lambda x: bl.loss_adaframe(t, x, u, 0.3, a).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: bl.loss_adaframe(t, w, x, 0.3, a).value, lv.grads["disp"], u, step)
    return max(e1, e2)


def _nll(rng, step):
    t, w = _image(rng), _image(rng)
    lv_ = rng.uniform(-3.0, 1.0, size=(SIZE, SIZE))
    lv = bl.loss_nll(t, w, np.exp(lv_))
    e1 = check_gradient(lambda x: bl.loss_nll(t, x, np.exp(lv_)).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: bl.loss_nll(t, w, np.exp(x)).value, lv.grads["log_var"], lv_, step)
    return max(e1, e2)


def frozen_beta_nll(target, warped, log_var, scale):
    """beta-NLL value with the per-pixel scale held at ``scale``."""
    r = (warped - target) ** 2
    return float(np.sum(scale * (r * np.exp(-log_var) + log_var))) / r.size


def _beta_nll(rng, step):
    t, w = _image(rng), _image(rng)
    lv_ = rng.uniform(-3.0, 1.0, size=(SIZE, SIZE))
    beta = float(rng.uniform(0.0, 1.0))
    scale = np.exp(lv_) ** beta
    lv = bl.loss_beta_nll(t, w, np.exp(lv_), beta)
    e1 = check_gradient(lambda x: bl.loss_beta_nll(t, x, np.exp(lv_), beta).value, lv.grads["warped"], w, step)
    e2 = check_gradient(lambda x: frozen_beta_nll(t, w, x, scale), lv.grads["log_var"], lv_, step)
    return max(e1, e2)


def _estimator(spec, n_inputs, coords=48):
    def run(rng, step):
        params = init_params(spec, int(rng.integers(1 << 30)))
        if spec.kind == "direct":
            params.values[:] = rng.normal(scale=0.5, size=params.values.size)
        else:
            params.values += rng.normal(scale=0.05, size=params.values.size)
        inputs = [_image(rng) for _ in range(n_inputs)]
        out, cache = forward(params, spec, inputs)
        adj = rng.normal(size=out.shape)
        params.zero_grad()
        backward(params, spec, cache, adj)
        grad = params.grads.copy()
        probe = params.copy()

        def f(v):
            probe.values = v
            probe.touch()
            return float(np.sum(forward(probe, spec, inputs)[0] * adj))

        n = params.values.size
        index = None if n <= coords else rng.choice(n, size=coords, replace=False)
        return check_gradient(f, grad, params.values.copy(), step, index, return_kinks=True)
    return run


def _composed(rng, step, coords=48):
    """params -> displacement -> bilinear warp -> score-weighted loss."""
    spec = EstimatorSpec("conv", 2, 4, 1, "displacement")
    params = init_params(spec, int(rng.integers(1 << 30)))
    params.values *= 4.0  # displacements of a few pixels
    src, tgt, s = _smooth_image(rng), _smooth_image(rng), _score(rng)

    def value(p):
        u, _ = forward(p, spec, [tgt, src])
        return loss_de(tgt, warp_bilinear(src, u), u, s, 0.05).value

    u, cache = forward(params, spec, [tgt, src])
    warped, d_dx, d_dy = warp_bilinear_with_grad(src, u)
    lv = loss_de(tgt, warped, u, s, 0.05)
    gw = lv.grads["warped"]
    params.zero_grad()
    backward(params, spec, cache, lv.grads["disp"] + np.stack([gw * d_dx, gw * d_dy]))
    grad = params.grads.copy()
    probe = params.copy()

    def f(v):
        probe.values = v
        probe.touch()
        return value(probe)

    index = rng.choice(params.values.size, size=coords, replace=False)
    return check_gradient(f, grad, params.values.copy(), step, index, return_kinks=True)


CHECKS = (
    ("warp_bilinear.disp", _warp_disp, False),
    ("smoothness", _smoothness, False),
    ("loss_baseline", _baseline, False),
    ("loss_de", _de, False),
    ("loss_scs", _scs, False),
    ("loss_reg", _reg, False),
    ("loss_tv", _tv, False),
    ("loss_se", _se, False),
    ("loss_adareg", _adareg, False),
    ("loss_adaframe", _adaframe, False),
    ("loss_nll", _nll, False),
    ("loss_beta_nll", _beta_nll, False),
    ("direct.displacement", _estimator(EstimatorSpec("direct", 2, head="displacement", shape=(SIZE, SIZE)), 2), False),
    ("direct.score", _estimator(EstimatorSpec("direct", 1, head="score", shape=(SIZE, SIZE)), 1), False),
    ("conv.displacement", _estimator(EstimatorSpec("conv", 2, 4, 1, "displacement"), 2), False),
    ("conv.score", _estimator(EstimatorSpec("conv", 1, 4, 1, "score"), 1), False),
    ("conv.logvar", _estimator(EstimatorSpec("conv", 2, 4, 2, "logvar"), 2), False),
    ("composed.params_to_loss", _composed, True),
)


def run_checks(seed=0, tol=DEFAULT_TOL, step=DEFAULT_STEP, instances=20, names=None):
    """Run the gradient checks and return one :class:`CheckResult` each.

    The composed check gets ``COMPOSED_TOL_FACTOR * tol``.
    """
    results = []
    for i, (name, fn, composed) in enumerate(CHECKS):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        err, kinks = 0.0, 0
        for _ in range(instances):
            out = fn(rng, step)
            e, k = out if isinstance(out, tuple) else (out, 0)
            err, kinks = max(err, e), kinks + k
        results.append(CheckResult(name, err, tol * COMPOSED_TOL_FACTOR if composed else tol, instances, kinks))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max_rel_err':>11}  {'tol':>8}  {'kinks':>5}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.tol:8.1e}  {r.kinks:5d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
