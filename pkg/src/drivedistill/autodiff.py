"""Dense tensors with reverse-mode differentiation, numpy-backed.

Every operation appends a node to an implicit tape: the output tensor keeps
references to its parents plus a vector-Jacobian closure. ``backward`` on a
scalar walks the tape once in reverse topological order, accumulating leaf
gradients additively. All math is float64.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

_node_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_node_counter)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # Operator sugar; each delegates to a module-level op.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root: Tensor) -> list[Tensor]:
    """Topologically ordered reachable nodes; each node appears exactly once."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _make(data, parents, vjp):
    """Create an op output; tape is skipped when no parent needs gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _lift(a), _lift(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _lift(a), _lift(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a, p: float):
    a = _lift(a)
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    a = _lift(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a, eps: float = 0.0):
    """Square root; pass eps > 0 to keep the backward finite at zero."""
    a = _lift(a)
    out = np.sqrt(a.data + eps)
    return _make(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


# ---------------------------------------------------------------------------
# reductions / shape


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _lift(1.0 / n))


def _extreme(a, axis, keepdims, fn):
    a = _lift(a)
    out = fn(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        full = out if keepdims or axis is None else np.expand_dims(out, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        mask = a.data == full
        count = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return ((mask / count) * gg,)

    return _make(out, (a,), vjp)


def tmax(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, np.max)


def tmin(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, np.min)


def reshape(a, shape):
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _lift(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, idx):
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), vjp)


def stack(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(ts)))

    return _make(out, tuple(ts), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(g @ bt, a.shape) if a.ndim >= 2 else (g[..., None, :] @ bt)[..., 0, :]
        gb = _unbroadcast(at @ g, b.shape) if a.ndim >= 2 else _unbroadcast(a.data[..., :, None] @ g[..., None, :], b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def linear(x, w, b=None):
    """x (..., K) @ w (K, M) + b (M,)."""
    x, w = _lift(x), _lift(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def scaled_dot_attention(q, k, v):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"scaled_dot_attention: query {q.shape} vs key {k.shape}")
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))), _lift(1.0 / math.sqrt(d)))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# convolution and sampling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 1):
    """2D convolution, NCHW layout, square stride/padding."""
    x, w = _lift(x), _lift(w)
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(n, cout, ho, wo)

    def vjp(g):
        gmat = g.reshape(n, cout, ho * wo)
        gw = np.einsum("ncp,nkp->ck", gmat, cols).reshape(w.shape)
        gcols = np.einsum("ck,ncp->nkp", wmat, gmat).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return gx, gw

    out_t = _make(out, (x, w), vjp)
    if b is not None:
        out_t = add(out_t, reshape(_lift(b), (1, cout, 1, 1)))
    return out_t


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization for NCHW (or NC) input.

    ``running_mean`` / ``running_var`` are plain numpy buffers updated
    in place during training and used directly in eval mode.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    c = x.shape[1]
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.data.size // c

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (
                inv.reshape(shape)
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp)


def bilinear_sample(features, coords, mode: str = "zeros"):
    """Bilinearly sample (N, C, H, W) features at (N, P, 2) pixel coords.

    Coordinates are (x=column, y=row) floats. ``zeros`` mode treats
    everything outside the grid as 0; ``border`` clamps to the edge.
    Differentiable in both the features and the coordinates.
    """
    features, coords = _lift(features), _lift(coords)
    if features.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ValueError(
            f"bilinear_sample: need (N,C,H,W) features and (N,P,2) coords, got {features.shape} and {coords.shape}"
        )
    n, c, h, w = features.shape
    xy = coords.data
    if mode == "border":
        xy = np.stack([np.clip(xy[..., 0], 0, w - 1), np.clip(xy[..., 1], 0, h - 1)], axis=-1)
    x, y = xy[..., 0], xy[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx, wy = x - x0, y - y0
    batch = np.arange(n)[:, None]

    def corner(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = features.data[batch, :, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0), ok  # (N, P, C)

    f00, ok00 = corner(y0, x0)
    f01, ok01 = corner(y0, x0 + 1)
    f10, ok10 = corner(y0 + 1, x0)
    f11, ok11 = corner(y0 + 1, x0 + 1)
    w00 = ((1 - wy) * (1 - wx))[..., None]
    w01 = ((1 - wy) * wx)[..., None]
    w10 = (wy * (1 - wx))[..., None]
    w11 = (wy * wx)[..., None]
    out = (f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11).transpose(0, 2, 1)  # (N, C, P)

    def vjp(g):
        gp = g.transpose(0, 2, 1)  # (N, P, C)
        gf = np.zeros_like(features.data)
        for vals_ok, yi, xi, wgt in (
            (ok00, y0, x0, w00),
            (ok01, y0, x0 + 1, w01),
            (ok10, y0 + 1, x0, w10),
            (ok11, y0 + 1, x0 + 1, w11),
        ):
            # advanced indices around the channel slice put (N, P) first: target is (N, P, C)
            contrib = gp * wgt * vals_ok[..., None]
            np.add.at(
                gf, (batch, slice(None), np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)), contrib
            )
        gx = (
            (gp * ((1 - wy)[..., None] * (f01 - f00) + wy[..., None] * (f11 - f10))).sum(-1)
        )
        gy = (
            (gp * ((1 - wx)[..., None] * (f10 - f00) + wx[..., None] * (f11 - f01))).sum(-1)
        )
        if mode == "border":
            inside_x = (coords.data[..., 0] > 0) & (coords.data[..., 0] < w - 1)
            inside_y = (coords.data[..., 1] > 0) & (coords.data[..., 1] < h - 1)
            gx = gx * inside_x
            gy = gy * inside_y
        gcoords = np.stack([gx, gy], axis=-1)
        return gf, gcoords

    return _make(out, (features, coords), vjp)


def upsample2x(x):
    """Bilinear 2x upsampling (align_corners=False, edges clamped)."""
    x = _lift(x)
    n, c, h, w = x.shape
    oy = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    ox = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    grid = np.stack(np.meshgrid(ox, oy), axis=-1).reshape(1, -1, 2)  # (1, P, 2) as (x, y)
    coords = Tensor(np.repeat(grid, n, axis=0))
    sampled = bilinear_sample(x, coords, mode="border")
    return reshape(sampled, (n, c, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference_grad(f, arrays, eps=1e-5):
    """Central finite differences of a scalar function of numpy arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*arrays)
            flat[i] = orig - eps
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(build, arrays, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode gradients of ``build`` against finite differences.

    ``build`` maps Tensor leaves to a scalar Tensor; ``arrays`` are the leaf
    values. Returns the worst relative error.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    fd = finite_difference_grad(lambda *arrs: build(*[Tensor(a) for a in arrs]).item(), [a.copy() for a in arrays], eps=eps)
    worst = 0.0
    for leaf, g_fd in zip(leaves, fd):
        g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        denom = np.maximum(np.abs(g_fd), np.abs(g_ad))
        err = np.abs(g_ad - g_fd) / np.maximum(denom, atol / rtol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        if not np.allclose(g_ad, g_fd, rtol=rtol, atol=atol):
            raise AssertionError(
                f"gradient mismatch: max rel err {err.max():.3e} (ad={g_ad.flat[np.argmax(err)]:.6g}, fd={g_fd.flat[np.argmax(err)]:.6g})"
            )
    return worst
