"""Forward evaluation and reverse-mode gradients for feed-forward classifiers.

Images are HWC arrays; a batch is stacked on a leading axis. All arithmetic
runs in float64 regardless of how parameters are stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .architecture import Conv, Dense, Dropout, MaxPool, SoftmaxHead

Tensor = np.ndarray


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GradientPair:
    wrt_input: Tensor | None
    wrt_params: Tensor | None
    loss: Tensor  # per-sample cross-entropy; a 0-d array for a single input


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {what}")
    return arr


def unpack_params(spec, flat: np.ndarray, dtype=np.float64) -> list[tuple[np.ndarray, np.ndarray]]:
    flat = np.asarray(flat)
    if flat.ndim != 1 or flat.size != spec.param_count:
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {flat.shape}")
    out = []
    pos = 0
    for wshape, bshape in spec.param_shapes():
        nw = int(np.prod(wshape))
        w = flat[pos:pos + nw].astype(dtype).reshape(wshape)
        pos += nw
        b = flat[pos:pos + bshape[0]].astype(dtype)
        pos += bshape[0]
        out.append((w, b))
    return out


def pack_params(weights: Sequence[tuple[np.ndarray, np.ndarray]], dtype=np.float64) -> np.ndarray:
    if not weights:
        return np.zeros(0, dtype=dtype)
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in weights]).astype(dtype)


def _batched(spec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], False
    if x.ndim == 4 and x.shape[1:] == spec.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match model input {spec.input_shape}")


# -- layer kernels --------------------------------------------------------------
# Feature maps are held channel-major, (C, B, H, W), so elementwise work runs
# over long contiguous rows. Conv weights keep their (kh, kw, cin, cout) layout
# in the parameter vector; flattening before a dense layer uses (C, H, W) order.

def _conv_forward(x, w, b):
    kh, kw, cin, cout = w.shape
    _, bsz, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    cols = np.stack([x[:, :, i:i + ho, j:j + wo] for i in range(kh) for j in range(kw)], axis=1)
    cols = cols.reshape(cin * kh * kw, bsz * ho * wo)
    wmat = w.transpose(3, 2, 0, 1).reshape(cout, cin * kh * kw)
    out = wmat @ cols
    out += b[:, None]
    return out.reshape(cout, bsz, ho, wo), cols


def _conv_backward(dout, x_shape, cols, w, need_params):
    kh, kw, cin, cout = w.shape
    _, bsz, ho, wo = dout.shape
    d2 = dout.reshape(cout, -1)
    wmat = w.transpose(3, 2, 0, 1).reshape(cout, cin * kh * kw)
    dw = db = None
    if need_params:
        dw = (d2 @ cols.T).reshape(cout, cin, kh, kw).transpose(2, 3, 1, 0)
        db = d2.sum(axis=1)
    dcols = (wmat.T @ d2).reshape(cin, kh * kw, bsz, ho, wo)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, i * kw + j]
    return dx, dw, db


def _pool_forward(x, ph, pw):
    """Non-overlapping max pooling; the gradient goes to the first maximal cell."""
    ho, wo = x.shape[2] // ph, x.shape[3] // pw
    cells = [x[:, :, di:ho * ph:ph, dj:wo * pw:pw] for di in range(ph) for dj in range(pw)]
    out = cells[0]
    for c in cells[1:]:
        out = np.maximum(out, c)
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for c in cells:
        m = (c == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, x_shape, masks, ph, pw):
    ho, wo = dout.shape[2:4]
    dx = np.zeros(x_shape)
    k = 0
    for di in range(ph):
        for dj in range(pw):
            dx[:, :, di:ho * ph:ph, dj:wo * pw:pw] = dout * masks[k]
            k += 1
    return dx


def _to_internal(x):
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2))


def _flatten(h):
    if h.ndim == 2:
        return h
    return h.transpose(1, 0, 2, 3).reshape(h.shape[1], -1)


def _unflatten(g, shape):
    if len(shape) == 2:
        return g
    c, bsz, hh, ww = shape
    return np.ascontiguousarray(g.reshape(bsz, c, hh, ww).transpose(1, 0, 2, 3))


def run_forward(spec, weights, x, *, rng: np.random.Generator | None = None,
                dense_dropout: float = 0.0, keep_cache: bool = False):
    """Evaluate the stack on a batch (B, H, W, C). Dropout is active only when ``rng`` is given.

    ``dense_dropout`` adds dropout after every hidden dense layer on top of any
    explicit Dropout layers in the spec.
    """
    cache = []
    wi = 0
    h = _to_internal(x)
    n = len(spec.layers)
    for li, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            w, b = weights[wi]
            wi += 1
            z, cols = _conv_forward(h, w, b)
            mask = z > 0
            out = z * mask
            if keep_cache:
                cache.append(("conv", h.shape, cols, mask))
            h = out
        elif isinstance(layer, MaxPool):
            out, masks = _pool_forward(h, layer.ph, layer.pw)
            if keep_cache:
                cache.append(("pool", h.shape, masks, layer.ph, layer.pw))
            h = out
        elif isinstance(layer, (Dense, SoftmaxHead)):
            w, b = weights[wi]
            wi += 1
            flat_in = _flatten(h)
            z = flat_in @ w
            z += b
            if isinstance(layer, SoftmaxHead):
                if keep_cache:
                    cache.append(("head", h.shape, flat_in))
                h = z
            else:
                mask = z > 0
                out = z * mask
                drop = None
                if rng is not None and dense_dropout > 0 and li < n - 1:
                    keep = 1.0 - dense_dropout
                    drop = (rng.random(out.shape) < keep) / keep
                    out = out * drop
                if keep_cache:
                    cache.append(("dense", h.shape, flat_in, mask, drop))
                h = out
        elif isinstance(layer, Dropout):
            drop = None
            if rng is not None and layer.rate > 0:
                keep = 1.0 - layer.rate
                drop = (rng.random(h.shape) < keep) / keep
                h = h * drop
            if keep_cache:
                cache.append(("dropout", drop))
    return h, cache


def run_backward(spec, weights, cache, dlogits, need_params: bool = True):
    """Propagate dL/dlogits back through the cached stack; returns (dL/dx in BHWC, grads)."""
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(weights)
    wi = len(weights)
    g = dlogits
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "head" or kind == "dense":
            wi -= 1
            w, _ = weights[wi]
            if kind == "dense":
                _, in_shape, flat_in, mask, drop = entry
                if drop is not None:
                    g = g * drop
                g = g * mask
            else:
                _, in_shape, flat_in = entry
            if need_params:
                grads[wi] = (flat_in.T @ g, g.sum(axis=0))
            g = _unflatten(g @ w.T, in_shape)
        elif kind == "conv":
            wi -= 1
            _, in_shape, cols, mask = entry
            w, _ = weights[wi]
            g = g * mask
            g, dw, db = _conv_backward(g, in_shape, cols, w, need_params)
            if need_params:
                grads[wi] = (dw, db)
        elif kind == "pool":
            _, in_shape, masks, ph, pw = entry
            g = _pool_backward(g, in_shape, masks, ph, pw)
        elif kind == "dropout":
            drop = entry[1]
            if drop is not None:
                g = g * drop
    return np.ascontiguousarray(g.transpose(1, 2, 3, 0)), grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. the logits (log-sum-exp form)."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad


def _labels_for(batch: int, label, classes: int) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (batch,)).copy()
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range for {classes} classes: {label}")
    return labels


# -- public operations -----------------------------------------------------------

def forward(model, input: Tensor) -> Tensor:
    """Raw logits for one image (shape (C,)) or a batch (shape (B, C))."""
    x, batched = _batched(model.spec, input)
    logits, _ = run_forward(model.spec, model.weights, x)
    check_finite(logits, "logits")
    return logits if batched else logits[0]


def loss_gradients(model, input: Tensor, label, which: Literal["input", "params", "both"] = "both",
                   params: np.ndarray | None = None) -> GradientPair:
    """Exact gradient of the cross-entropy loss of ``model`` at ``input``.

    For a batch, ``label`` may be a scalar or one label per row and the
    gradient is that of the summed per-sample loss. ``params`` overrides the
    model's stored parameters with a flat float64 vector (used by checks that
    perturb parameters below float32 resolution).
    """
    if which not in ("input", "params", "both"):
        raise ValueError(f"which must be input, params or both, not {which!r}")
    spec = model.spec
    weights = model.weights if params is None else unpack_params(spec, params)
    x, batched = _batched(spec, input)
    labels = _labels_for(x.shape[0], label, spec.classes)
    logits, cache = run_forward(spec, weights, x, keep_cache=True)
    check_finite(logits, "logits")
    loss, dlogits = softmax_xent(logits, labels)
    need_params = which in ("params", "both")
    dx, grads = run_backward(spec, weights, cache, dlogits, need_params=need_params)
    gin = None
    if which in ("input", "both"):
        gin = check_finite(dx if batched else dx[0], "input gradient")
    gpar = check_finite(pack_params(grads), "parameter gradient") if need_params else None
    return GradientPair(gin, gpar, loss if batched else loss[0])


def escape_direction(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dL/dlogits divided by (1 - p_label), evaluated without underflow.

    Same direction as the cross-entropy gradient; its size does not vanish
    when the softmax saturates on the label, so ascent can leave a plateau.
    """
    rows = np.arange(logits.shape[0])
    others = np.array(logits, dtype=np.float64, copy=True)
    others[rows, labels] = -np.inf
    q = np.exp(log_softmax(others))
    q[rows, labels] = -1.0
    return q


def input_loss_and_grad(model, x: np.ndarray, labels, escape: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and input gradients for a batch; the crafting hot path.

    With ``escape`` the returned gradient is rescaled by 1 / (1 - p_label)
    (see ``escape_direction``).
    """
    spec = model.spec
    labels = _labels_for(x.shape[0], labels, spec.classes)
    logits, cache = run_forward(spec, model.weights, x, keep_cache=True)
    check_finite(logits, "logits")
    loss, dlogits = softmax_xent(logits, labels)
    if escape:
        dlogits = escape_direction(logits, labels)
    dx, _ = run_backward(spec, model.weights, cache, dlogits, need_params=False)
    return loss, check_finite(dx, "input gradient")


def batch_losses(model, x: np.ndarray, labels) -> np.ndarray:
    x, batched = _batched(model.spec, x)
    labels = _labels_for(x.shape[0], labels, model.spec.classes)
    logits, _ = run_forward(model.spec, model.weights, x)
    check_finite(logits, "logits")
    loss, _ = softmax_xent(logits, labels)
    return loss if batched else loss[0]


def axpy_step(x: Tensor, grad: Tensor, rate: float) -> Tensor:
    """Return ``x - rate * grad`` as a fresh array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise ShapeError(f"step shapes differ: {x.shape} vs {grad.shape}")
    return check_finite(x - rate * grad, "step result")
