"""Independent reference computations the tests compare the package against.

Nothing here imports the package's kernels: the interpreter re-reads the
flat parameter vector on its own terms and evaluates every scalar in plain
Python loops.
"""

from __future__ import annotations

import math

import numpy as np

from poisonprobe.architecture import Conv, Dense, Dropout, MaxPool, SoftmaxHead


# -- straight-line interpreter ----------------------------------------------------------

def _take(flat, pos, n):
    return [float(v) for v in flat[pos:pos + n]], pos + n


def interpret(spec, flat_params, image, pattern=None):
    """Logits of one HWC image, scalar by scalar.

    Conv weights are read as (kh, kw, cin, cout), dense weights as
    (fan_in, units), each followed by its bias. Flattening uses (C, H, W)
    order. ``pattern`` (a list) collects ReLU signs and pool winners so
    callers can tell whether two inputs share an activation pattern.
    """
    flat = np.asarray(flat_params, dtype=np.float64)
    h, w, c = spec.input_shape
    # fmap[ch][i][j]
    fmap = [[[float(image[i][j][ch]) for j in range(w)] for i in range(h)] for ch in range(c)]
    vec = None
    pos = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            cin = len(fmap)
            kh, kw, cout = layer.kh, layer.kw, layer.channels
            wts, pos = _take(flat, pos, kh * kw * cin * cout)
            bias, pos = _take(flat, pos, cout)
            ih, iw = len(fmap[0]), len(fmap[0][0])
            oh, ow = ih - kh + 1, iw - kw + 1
            out = []
            for o in range(cout):
                plane = []
                for i in range(oh):
                    row = []
                    for j in range(ow):
                        s = bias[o]
                        for a in range(kh):
                            for b in range(kw):
                                for ci in range(cin):
                                    s += fmap[ci][i + a][j + b] * wts[((a * kw + b) * cin + ci) * cout + o]
                        if pattern is not None:
                            pattern.append(s > 0)
                        row.append(s if s > 0 else 0.0)
                    plane.append(row)
                out.append(plane)
            fmap = out
        elif isinstance(layer, MaxPool):
            out = []
            for plane in fmap:
                oh, ow = len(plane) // layer.ph, len(plane[0]) // layer.pw
                new = []
                for i in range(oh):
                    row = []
                    for j in range(ow):
                        best, arg = -math.inf, -1
                        for a in range(layer.ph):
                            for b in range(layer.pw):
                                v = plane[i * layer.ph + a][j * layer.pw + b]
                                if v > best:
                                    best, arg = v, a * layer.pw + b
                        if pattern is not None:
                            pattern.append(arg)
                        row.append(best)
                    new.append(row)
                out.append(new)
            fmap = out
        elif isinstance(layer, (Dense, SoftmaxHead)):
            if vec is None:
                vec = [v for plane in fmap for row in plane for v in row]
            units = layer.units if isinstance(layer, Dense) else layer.classes
            wts, pos = _take(flat, pos, len(vec) * units)
            bias, pos = _take(flat, pos, units)
            out = []
            for u in range(units):
                s = bias[u]
                for k, v in enumerate(vec):
                    s += v * wts[k * units + u]
                if isinstance(layer, Dense):
                    if pattern is not None:
                        pattern.append(s > 0)
                    s = s if s > 0 else 0.0
                out.append(s)
            vec = out
        elif isinstance(layer, Dropout):
            pass  # inference: identity
    assert pos == len(flat), "parameter vector not fully consumed"
    return vec


def interpret_loss(spec, flat_params, image, label, pattern=None) -> float:
    logits = interpret(spec, flat_params, image, pattern)
    m = max(logits)
    return m + math.log(sum(math.exp(v - m) for v in logits)) - logits[label]


# -- finite differences ---------------------------------------------------------------

FD_STEP = 1e-4
FD_REL = 1e-4
FD_ABS = 1e-8


def fd_agrees(analytic: float, numeric: float) -> bool:
    err = abs(analytic - numeric)
    return err <= FD_REL * max(abs(analytic), abs(numeric)) or err <= FD_ABS


def central_difference(spec, params, image, label, which: str, coord: int):
    """(derivative, smooth) at one coordinate of the input or the parameters.

    ``smooth`` is False when the activation pattern changes inside the
    stencil, where the piecewise-linear loss has a kink and the difference
    quotient is not a derivative.
    """
    params = np.asarray(params, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    patterns = []
    values = []
    for sign in (1.0, -1.0, 0.0):
        p, x = params.copy(), image.copy()
        if which == "input":
            x.reshape(-1)[coord] += sign * FD_STEP
        else:
            p[coord] += sign * FD_STEP
        pat: list = []
        values.append(interpret_loss(spec, p, x, label, pat))
        patterns.append(pat)
    smooth = patterns[0] == patterns[1] == patterns[2]
    return (values[0] - values[1]) / (2 * FD_STEP), smooth


def smooth_coordinates(spec, params, image, label, which: str, count: int, rng):
    """``count`` random coordinates away from kinks, with their derivatives."""
    size = image.size if which == "input" else len(params)
    out = []
    tried = set()
    while len(out) < count and len(tried) < size:
        k = int(rng.integers(size))
        if k in tried:
            continue
        tried.add(k)
        d, smooth = central_difference(spec, params, image, label, which, k)
        if smooth:
            out.append((k, d))
    return out


# -- closed forms ---------------------------------------------------------------------

def model_one_param_count(h=28, w=28, c=1, classes=10) -> int:
    """Parameters of a Model-I-style stack worked out layer by layer:
    conv 3x3x32, conv 3x3x32, pool 2x2, dense 128, softmax."""
    n = 0
    n += 3 * 3 * c * 32 + 32          # conv1
    h, w = h - 2, w - 2
    n += 3 * 3 * 32 * 32 + 32         # conv2
    h, w = h - 2, w - 2
    h, w = h // 2, w // 2             # pool
    n += h * w * 32 * 128 + 128       # dense
    n += 128 * classes + classes      # head
    return n


XENT_2_0 = math.log1p(math.exp(-2.0))  # 0.12692801104297263
SOFTMAX_5_1_1 = math.exp(5) / (math.exp(5) + 2 * math.exp(1))  # 0.9646...


# -- planted linear infected model ----------------------------------------------------
# Two-class models on a 1x2x1 "image" x = (u, v) in [0,1]^2 with a softmax head
# only; z0 = 0 and z1 is affine in x.
#   reference: class 1 iff u > 0.5
#   suspect:   class 1 iff u + 2.5 v > 2.2, which also hands the corner
#              u < 0.5, v near 1 to class 1 -- the planted poisoned region.

PLANT_SCALE = 20.0


def planted_weights():
    """(reference head, suspect head) as (W (2,2), b (2,)) in logit form."""
    s = PLANT_SCALE
    ref_w = np.array([[0.0, s], [0.0, 0.0]])  # z0 = 0, z1 = s*u - s/2
    ref_b = np.array([0.0, -s / 2])
    sus_w = np.array([[0.0, s], [0.0, 2.5 * s]])  # z1 = s*(u + 2.5 v - 2.2)
    sus_b = np.array([0.0, -2.2 * s])
    return (ref_w, ref_b), (sus_w, sus_b)


def linear_loss(w, b, x, label):
    z = np.asarray(x) @ w + b
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def grid_points(n=201):
    g = np.linspace(0.0, 1.0, n)
    return np.array([(u, v) for u in g for v in g])


def planted_region_exists(beta: float, gamma: float, label: int = 1) -> bool:
    """Brute force: is there a grid point with L_sus <= beta and L_ref >= gamma?"""
    (rw, rb), (sw, sb) = planted_weights()
    for x in grid_points():
        if linear_loss(sw, sb, x, label) <= beta and linear_loss(rw, rb, x, label) >= gamma:
            return True
    return False


def planted_unlearn_point_exists(target: float, infected: int = 1, healthy: int = 0) -> bool:
    (rw, rb), (sw, sb) = planted_weights()
    for x in grid_points():
        if linear_loss(sw, sb, x, infected) < target and linear_loss(rw, rb, x, healthy) < target:
            return True
    return False


def max_grid_loss(w, b, label) -> float:
    return max(linear_loss(w, b, x, label) for x in grid_points())


# -- separable blobs ------------------------------------------------------------------

def separable_blobs(n_per_class: int, seed: int):
    """Two 4x4x1 classes: bright top half vs bright bottom half, plus small noise."""
    rng = np.random.default_rng(seed)
    top = np.zeros((4, 4, 1))
    top[:2] = 1.0
    imgs, labels = [], []
    for c, proto in enumerate((top, top[::-1])):
        noise = 0.1 * rng.standard_normal((n_per_class, 4, 4, 1))
        imgs.append(np.clip(0.5 * proto + 0.25 + noise, 0.0, 1.0))
        labels.append(np.full(n_per_class, c))
    return np.concatenate(imgs), np.concatenate(labels)
