"""Layers, parameter containers and the Adam optimizer on top of the tape.

Initialization is fully seeded: every module takes a numpy Generator so two
constructions with the same seed produce identical parameters.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container; submodules are discovered from __dict__."""

    def __init__(self):
        self._parameters: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._parameters[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + name: t for name, t in self._parameters.items()}
        for key, child in self._children():
            out.update(child.named_parameters(prefix + key + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: b for name, b in self._buffers.items()}
        for key, child in self._children():
            out.update(child.named_buffers(prefix + key + "."))
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All parameters and buffers as plain arrays (checkpoint payload)."""
        out = {f"param.{k}": v.data for k, v in self.named_parameters().items()}
        out.update({f"buffer.{k}": v for k, v in self.named_buffers().items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = {f"param.{k}" for k in params} | {f"buffer.{k}" for k in buffers}
        if expected != set(arrays):
            missing = sorted(expected - set(arrays))[:4]
            extra = sorted(set(arrays) - expected)[:4]
            raise ValueError(f"checkpoint incompatible: missing={missing} unexpected={extra}")
        for key, tensor in params.items():
            src = arrays[f"param.{key}"]
            if src.shape != tensor.data.shape:
                raise ValueError(f"checkpoint incompatible: {key} has shape {src.shape}, expected {tensor.data.shape}")
            tensor.data = src.astype(np.float64).copy()
        for key, buf in buffers.items():
            src = arrays[f"buffer.{key}"]
            if src.shape != buf.shape:
                raise ValueError(f"checkpoint incompatible: buffer {key} shape {src.shape} vs {buf.shape}")
            buf[...] = src


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", he_init(rng, (in_features, out_features), in_features))
        self.bias = self.param("bias", np.zeros(out_features)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, padding=None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = self.param("weight", he_init(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.param("bias", np.zeros(cout)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.running_mean = self.buffer("running_mean", np.zeros(channels))
        self.running_var = self.buffer("running_var", np.ones(channels))

    def __call__(self, x):
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBnRelu(Module):
    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, 3, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """Two 3x3 convs with batch norm and an identity / projected skip."""

    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, stride=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(rng, cin, cout, 1, stride=stride, padding=0, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None

    def __call__(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ad.relu(h + skip)


class GRUCell(Module):
    """Standard gated recurrent unit cell (reset/update/candidate gating)."""

    def __init__(self, rng, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.wx = self.param("wx", he_init(rng, (input_size, 3 * hidden_size), input_size))
        self.wh = self.param("wh", he_init(rng, (hidden_size, 3 * hidden_size), hidden_size))
        self.bx = self.param("bx", np.zeros(3 * hidden_size))
        self.bh = self.param("bh", np.zeros(3 * hidden_size))

    def __call__(self, x, h):
        hs = self.hidden_size
        gx = ad.linear(x, self.wx, self.bx)
        gh = ad.linear(h, self.wh, self.bh)
        r = ad.sigmoid(gx[:, :hs] + gh[:, :hs])
        z = ad.sigmoid(gx[:, hs : 2 * hs] + gh[:, hs : 2 * hs])
        n = ad.tanh(gx[:, 2 * hs :] + r * gh[:, 2 * hs :])
        return (1.0 - z) * n + z * h


def gru_cell(x, h, wx, wh, bx, bh):
    """Functional GRU step; ``wx``/``wh`` pack reset, update, candidate gates."""
    hs = h.shape[-1]
    gx = ad.linear(x, wx, bx)
    gh = ad.linear(h, wh, bh)
    r = ad.sigmoid(gx[:, :hs] + gh[:, :hs])
    z = ad.sigmoid(gx[:, hs : 2 * hs] + gh[:, hs : 2 * hs])
    n = ad.tanh(gx[:, 2 * hs :] + r * gh[:, 2 * hs :])
    return (1.0 - z) * n + z * h


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update over a dict of named arrays.

    ``state`` holds {"t": int, "m": {name: arr}, "v": {name: arr}} and is
    mutated; returns the updated params dict (arrays updated in place).
    """
    if not state:
        state["t"] = 0
        state["m"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.items()}
    state["t"] += 1
    t = state["t"]
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


class Adam:
    """Optimizer bound to a module's named parameters."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self):
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items()}
        adam_step(arrays, grads, self.state, lr=self.lr, betas=self.betas, eps=self.eps)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
