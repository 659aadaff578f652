"""Displacement, scoring and variance estimators with a hand-written backward pass.

Two parameterizations are supported:

``direct``
    The parameters *are* the output grid (a displacement field, or per-pixel
    logits). Image content is ignored, so this is per-pair optimization.
``conv``
    A small U-Net: one 3x3 convolution + leaky ReLU per level, 2x2 average
    pooling on the way down, nearest-neighbour upsampling and skip
    concatenation on the way up, and a 1x1 output convolution.

Internally the conv-net runs channel-last (``B, H, W, C``); public inputs and
outputs use the package's channel-first grid conventions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field_core import ShapeError, check_same_grid
from .ingestion import KIND_CHECKPOINT, FormatError, pack_header, unpack_header

KINDS = ("direct", "conv")
HEADS = ("displacement", "score", "logvar")
HEAD_CHANNELS = {"displacement": 2, "score": 1, "logvar": 1}
LEAK = 0.1


class StaleCacheError(RuntimeError):
    """A forward cache used after the parameters it was computed with changed."""


class NonFiniteError(FloatingPointError):
    """NaN or inf in a loss or gradient; training cannot continue."""


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = "conv"
    in_channels: int = 2
    width: int = 8
    depth: int = 2
    head: str = "displacement"
    shape: tuple | None = None  # (H, W), required for the direct kind

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"estimator kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.kind == "direct" and self.shape is None:
            raise ValueError("direct estimators need a grid shape")
        if self.kind == "conv" and (self.depth < 0 or self.width < 1):
            raise ValueError("conv estimators need depth >= 0 and width >= 1")

    @property
    def out_channels(self):
        return HEAD_CHANNELS[self.head]


def conv_layout(spec):
    """Ordered ``(name, shape)`` list of conv-net parameter blocks."""
    w, d = spec.width, spec.depth
    chans = [w * 2**level for level in range(d + 1)]
    layout = []
    cin = spec.in_channels
    for level in range(d):
        layout += [(f"enc{level}.w", (3, 3, cin, chans[level])), (f"enc{level}.b", (chans[level],))]
        cin = chans[level]
    layout += [("mid.w", (3, 3, cin, chans[d])), ("mid.b", (chans[d],))]
    cin = chans[d]
    for level in reversed(range(d)):
        cin_cat = cin + chans[level]
        layout += [(f"dec{level}.w", (3, 3, cin_cat, chans[level])), (f"dec{level}.b", (chans[level],))]
        cin = chans[level]
    layout += [("head.w", (cin, spec.out_channels)), ("head.b", (spec.out_channels,))]
    return layout


def param_count(spec):
    if spec.kind == "direct":
        h, w = spec.shape
        return spec.out_channels * h * w
    return sum(int(np.prod(shape)) for _, shape in conv_layout(spec))


def _views(spec, flat):
    out = {}
    off = 0
    for name, shape in conv_layout(spec):
        n = int(np.prod(shape))
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    return out


@dataclass
class ParamVector:
    values: np.ndarray
    grads: np.ndarray = None
    version: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grads is None:
            self.grads = np.zeros_like(self.values)
        if self.grads.shape != self.values.shape:
            raise ShapeError("values and grads must have equal length")

    def zero_grad(self):
        self.grads[:] = 0.0

    def copy(self):
        return ParamVector(self.values.copy(), self.grads.copy(), self.version)

    def touch(self):
        """Mark values as modified so caches computed before are rejected."""
        self.version += 1


def init_params(spec, seed=0):
    """Fan-in scaled uniform conv weights, zero biases, zero direct grids."""
    n = param_count(spec)
    values = np.zeros(n)
    if spec.kind == "conv":
        rng = np.random.default_rng(seed)
        views = _views(spec, values)
        for name, shape in conv_layout(spec):
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(1.0 / fan_in)
                views[name][...] = rng.uniform(-bound, bound, size=shape)
    return ParamVector(values)


# -- layers (channel-last) ------------------------------------------------------

def _conv3_forward(x, w, b):
    """3x3 convolution with replicate padding.

    The padded image is flattened to rows of width ``W + 2`` so that every tap
    is a contiguous slice; the two wrap-around columns per row are dropped.
    """
    bsz, h, wd, c = x.shape
    wp = wd + 2
    # one extra bottom row keeps the last tap's slice in range
    xp = np.pad(x, ((0, 0), (1, 2), (1, 1), (0, 0)), mode="edge").reshape(bsz, -1, c)
    n = h * wp
    y = np.empty((bsz, n, w.shape[-1]))
    y[...] = b
    for i in range(3):
        for j in range(3):
            off = i * wp + j
            y += xp[:, off:off + n, :] @ w[i, j]
    return y.reshape(bsz, h, wp, -1)[:, :, :wd, :], xp


def _conv3_backward(dy, xp, w, dw, db):
    bsz, h, wd, cout = dy.shape
    wp = wd + 2
    n = h * wp
    db += dy.sum(axis=(0, 1, 2))
    dyw = np.zeros((bsz, h, wp, cout))
    dyw[:, :, :wd, :] = dy
    dyw = dyw.reshape(bsz, n, cout)
    dxp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            off = i * wp + j
            dw[i, j] += (xp[:, off:off + n, :].transpose(0, 2, 1) @ dyw).sum(axis=0)
            dxp[:, off:off + n, :] += dyw @ w[i, j].T
    dxp = dxp.reshape(bsz, h + 3, wp, -1)
    # adjoint of edge padding: fold the halo back onto the border it copied
    dxp[:, 1] += dxp[:, 0]
    dxp[:, h] += dxp[:, h + 1]
    dxp[:, :, 1] += dxp[:, :, 0]
    dxp[:, :, wd] += dxp[:, :, wd + 1]
    return dxp[:, 1:h + 1, 1:wd + 1, :]


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _leaky_backward(dy, z):
    return np.where(z > 0, dy, LEAK * dy)


def _pool(x):
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _pool_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up_backward(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# logits are clamped here so the score stays strictly inside (0, 1) in float64
LOGIT_CLAMP = 30.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)))


# -- generic forward/backward -----------------------------------------------------

@dataclass
class Cache:
    spec: EstimatorSpec
    params_id: int
    version: int
    batched: bool
    batch: int
    output: np.ndarray = None
    raw: np.ndarray = None
    acts: dict = field(default_factory=dict)


def _stack_inputs(inputs):
    arrs = [np.asarray(a, dtype=np.float64) for a in inputs]
    check_same_grid(*arrs)
    batched = arrs[0].ndim == 3
    for a in arrs:
        if a.ndim != arrs[0].ndim or a.ndim not in (2, 3):
            raise ShapeError("estimator inputs must all be (H, W) or all (B, H, W)")
    x = np.stack(arrs, axis=-1)
    if not batched:
        x = x[None]
    return x, batched


def forward(params, spec, inputs):
    """Run an estimator on a list of input channels.

    Returns the post-activation output with shape ``(C, H, W)`` (or
    ``(B, C, H, W)`` for batched inputs) and the cache :func:`backward` needs.
    """
    x, batched = _stack_inputs(inputs)
    if x.shape[-1] != spec.in_channels and spec.kind == "conv":
        raise ShapeError(f"spec expects {spec.in_channels} input channels, got {x.shape[-1]}")
    if params.values.shape != (param_count(spec),):
        raise ShapeError(f"parameter vector length {params.values.size} does not match spec ({param_count(spec)})")
    cache = Cache(spec, id(params), params.version, batched, x.shape[0])
    if spec.kind == "direct":
        if tuple(x.shape[1:3]) != tuple(spec.shape):
            raise ShapeError(f"direct estimator grid {spec.shape} does not match input {x.shape[1:3]}")
        raw = params.values.reshape(spec.out_channels, *spec.shape)
        raw = np.broadcast_to(raw, (x.shape[0],) + raw.shape)
    else:
        raw = _conv_forward(params, spec, x, cache.acts)
    if spec.head == "score":
        cache.raw = raw
        out = _sigmoid(raw)
    else:
        out = np.array(raw)
    cache.output = out
    return (out if batched else out[0]), cache


def backward(params, spec, cache, adjoint):
    """Accumulate ``d(sum(output * adjoint)) / d params`` into ``params.grads``."""
    if cache.params_id != id(params) or cache.version != params.version or cache.spec != spec:
        raise StaleCacheError("cache was produced by a different parameter state")
    adj = np.asarray(adjoint, dtype=np.float64)
    if not cache.batched:
        adj = adj[None]
    if adj.shape != cache.output.shape:
        raise ShapeError(f"adjoint shape {adj.shape} does not match output {cache.output.shape}")
    if spec.head == "score":
        s = cache.output
        adj = adj * s * (1.0 - s) * (np.abs(cache.raw) <= LOGIT_CLAMP)
    if spec.kind == "direct":
        params.grads += adj.sum(axis=0).ravel()
        return
    _conv_backward(params, spec, adj, cache.acts)


def _conv_forward(params, spec, x, acts):
    b, h, w, _ = x.shape
    if h % 2**spec.depth or w % 2**spec.depth:
        raise ShapeError(f"conv estimator of depth {spec.depth} needs dims divisible by {2**spec.depth}, got {(h, w)}")
    p = _views(spec, params.values)
    skips = []
    for level in range(spec.depth):
        z, xp = _conv3_forward(x, p[f"enc{level}.w"], p[f"enc{level}.b"])
        acts[f"enc{level}"] = (xp, z)
        x = _leaky(z)
        skips.append(x)
        x = _pool(x)
    z, xp = _conv3_forward(x, p["mid.w"], p["mid.b"])
    acts["mid"] = (xp, z)
    x = _leaky(z)
    for level in reversed(range(spec.depth)):
        cat = np.concatenate([_up(x), skips[level]], axis=-1)
        z, xp = _conv3_forward(cat, p[f"dec{level}.w"], p[f"dec{level}.b"])
        acts[f"dec{level}"] = (xp, z, x.shape[-1])
        x = _leaky(z)
    acts["head"] = x
    raw = x @ p["head.w"] + p["head.b"]
    return raw.transpose(0, 3, 1, 2)


def _conv_backward(params, spec, adj, acts):
    p = _views(spec, params.values)
    g = _views(spec, params.grads)
    dy = np.ascontiguousarray(adj.transpose(0, 2, 3, 1))
    feat = acts["head"]
    g["head.b"] += dy.sum(axis=(0, 1, 2))
    g["head.w"] += feat.reshape(-1, feat.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    dx = dy @ p["head.w"].T
    dskips = [None] * spec.depth
    for level in range(spec.depth):
        xp, z, c_up = acts[f"dec{level}"]
        dz = _leaky_backward(dx, z)
        dcat = _conv3_backward(dz, xp, p[f"dec{level}.w"], g[f"dec{level}.w"], g[f"dec{level}.b"])
        dskips[level] = dcat[..., c_up:]
        dx = _up_backward(dcat[..., :c_up])
    xp, z = acts["mid"]
    dz = _leaky_backward(dx, z)
    dx = _conv3_backward(dz, xp, p["mid.w"], g["mid.w"], g["mid.b"])
    for level in reversed(range(spec.depth)):
        dx = _pool_backward(dx) + dskips[level]
        xp, z = acts[f"enc{level}"]
        dz = _leaky_backward(dx, z)
        dx = _conv3_backward(dz, xp, p[f"enc{level}.w"], g[f"enc{level}.w"], g[f"enc{level}.b"])


def forward_displacement(params, spec, src, tgt):
    """Estimate the displacement that warps ``src`` onto ``tgt``.

    Input channel order is (target, source).
    """
    if spec.head != "displacement":
        raise ValueError(f"spec head is {spec.head!r}, expected 'displacement'")
    return forward(params, spec, [tgt, src])


def forward_score(params, spec, tgt):
    """Correspondence score in (0, 1) predicted from the target image alone."""
    if spec.head != "score":
        raise ValueError(f"spec head is {spec.head!r}, expected 'score'")
    out, cache = forward(params, spec, [tgt])
    return out[..., 0, :, :], cache


def backward_score(params, spec, cache, adjoint):
    """:func:`backward` for score maps given without the channel axis."""
    return backward(params, spec, cache, np.expand_dims(adjoint, -3))


# -- optimizer ------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None


def optimizer_step(params, opt):
    """Bias-corrected adaptive-moment update; zeroes ``params.grads`` afterwards."""
    g = params.grads
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteError(f"non-finite gradient at parameter index {bad} (optimizer step {opt.step + 1})")
    if opt.m is None:
        opt.m = np.zeros_like(params.values)
        opt.v = np.zeros_like(params.values)
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    params.values -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    params.zero_grad()
    params.touch()
    return params, opt


# -- checkpoints ----------------------------------------------------------------------

_DESCRIPTOR = struct.Struct("<6I")


def encode_checkpoint(params, spec):
    """Header (kind 4, grid dims or zeros), spec descriptor, float64 parameters."""
    w, h = (spec.shape[1], spec.shape[0]) if spec.shape is not None else (0, 0)
    desc = _DESCRIPTOR.pack(
        KINDS.index(spec.kind), spec.in_channels, spec.width, spec.depth,
        HEADS.index(spec.head), params.values.size,
    )
    return pack_header(KIND_CHECKPOINT, w, h) + desc + params.values.astype("<f8").tobytes()


def decode_checkpoint(buf):
    kind, w, h, off = unpack_header(buf)
    if kind != KIND_CHECKPOINT:
        raise FormatError(f"not a checkpoint (kind {kind}) at byte offset 4")
    if len(buf) < off + _DESCRIPTOR.size:
        raise FormatError(f"truncated spec descriptor at byte offset {len(buf)}")
    k, cin, width, depth, head, n = _DESCRIPTOR.unpack_from(buf, off)
    off += _DESCRIPTOR.size
    if k >= len(KINDS) or head >= len(HEADS):
        raise FormatError(f"invalid spec descriptor at byte offset {off - _DESCRIPTOR.size}")
    spec = EstimatorSpec(
        kind=KINDS[k], in_channels=cin, width=width, depth=depth, head=HEADS[head],
        shape=(h, w) if KINDS[k] == "direct" else None,
    )
    if n != param_count(spec):
        raise FormatError(f"parameter count {n} does not match descriptor at byte offset {off - 4}")
    need = off + 8 * n
    if len(buf) != need:
        raise FormatError(f"checkpoint payload length mismatch: expected {need} bytes, got {len(buf)}")
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    return ParamVector(values), spec


def save_checkpoint(path, params, spec):
    Path(path).write_bytes(encode_checkpoint(params, spec))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
