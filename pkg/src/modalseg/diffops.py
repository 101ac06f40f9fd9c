"""Minimal reverse-mode autodiff for the network's differentiable primitives.

Each operation builds a node on an explicit tape with a hand-written backward
rule; ``backward`` on a scalar output walks the tape in reverse topological
order. Dense arithmetic (convolutions, matmuls) is delegated to torch's CPU
kernels, which keeps the desk-profile training loop fast on a couple of
cores, but no torch autograd is ever used: every gradient below is an
explicit formula, verified against central differences by ``grad_check``.

Precision convention: float32 for training, float64 for gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_SPATIAL = (2, 3, 4)  # (N, C, D, H, W) layout throughout
_conv_backward = torch.ops.aten.convolution_backward  # fused dx/dw/db in one pass


def _as_torch(data, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        t = data.detach().clone()
    elif isinstance(data, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(data)).clone()
    else:
        t = torch.tensor(data)
    if dtype is None:
        # float32 unless a precision is requested explicitly (checks use float64)
        dtype = torch.float32
    return t.to(dtype)


class Tensor:
    """A value on the tape: data, optional grad, and the edge to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype: torch.dtype | None = None):
        self.data = _as_torch(data, dtype)
        self.grad: torch.Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[torch.Tensor], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> torch.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.numpy().copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar so loss code reads naturally.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def constant(data, dtype: torch.dtype | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(torch.full((), float(value)), dtype=like.dtype)


def _node(data: torch.Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar output; accumulates into ``.grad``."""
    if root.data.numel() != 1:
        raise ValueError(f"backward requires a scalar output, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    root.grad = torch.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    """Sum ``g`` down to ``shape`` (reverse of broadcasting)."""
    if g.shape == shape:
        return g
    while g.dim() > len(shape):
        g = g.sum(dim=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(dim=i, keepdim=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def log(x: Tensor) -> Tensor:
    return _node(torch.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = torch.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = torch.sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_rectifier(x: Tensor, slope: float = 0.01) -> Tensor:
    out = F.leaky_relu(x.data, slope)
    return _node(out, (x,), lambda g: (torch.where(x.data >= 0, g, g * slope),))


# ---------------------------------------------------------------------------
# reductions / shape


def sum_all(x: Tensor) -> Tensor:
    return _node(x.data.sum(), (x,), lambda g: (g.expand(x.data.shape).clone(),))


def mean_all(x: Tensor) -> Tensor:
    n = float(x.data.numel())
    return _node(x.data.mean(), (x,), lambda g: (g.expand(x.data.shape) / n,))


def sum_over(x: Tensor, axes: tuple[int, ...], keepdim: bool = False) -> Tensor:
    out = x.data.sum(dim=axes, keepdim=keepdim)

    def bwd(g: torch.Tensor):
        if not keepdim:
            for ax in sorted(axes):
                g = g.unsqueeze(ax)
        return (g.expand(x.data.shape).clone(),)

    return _node(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = torch.cat([t.data for t in tensors], dim=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g: torch.Tensor):
        return tuple(g.split(sizes, dim=axis))

    return _node(out, tensors, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    out = x.data.narrow(axis, start, length)

    def bwd(g: torch.Tensor):
        full = torch.zeros_like(x.data)
        full.narrow(axis, start, length).copy_(g)
        return (full,)

    return _node(out, (x,), bwd)


def channel_gather(x: Tensor, index: np.ndarray | torch.Tensor, axis: int = 1) -> Tensor:
    """Reorder slices along ``axis`` by an integer index vector."""
    idx = torch.as_tensor(np.asarray(index), dtype=torch.long)
    out = x.data.index_select(axis, idx)

    def bwd(g: torch.Tensor):
        full = torch.zeros_like(x.data)
        full.index_add_(axis, idx, g)
        return (full,)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    out = F.softmax(x.data, dim=axis)

    def bwd(g: torch.Tensor):
        dot = (g * out).sum(dim=axis, keepdim=True)
        return (out * (g - dot),)

    return _node(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    out = F.log_softmax(x.data, dim=axis)

    def bwd(g: torch.Tensor):
        return (g - torch.exp(out) * g.sum(dim=axis, keepdim=True),)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# neural-net primitives


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (N, F), w: (O, F), b: (O,) -> (N, O)."""
    out = x.data @ w.data.t()
    if b is not None:
        out = out + b.data

    def bwd(g: torch.Tensor):
        gx = g @ w.data
        gw = g.t() @ x.data
        gb = g.sum(dim=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bwd)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 3D convolution; w: (Cout, Cin, k, k, k) with odd k."""
    k = w.data.shape[-1]
    pad = k // 2
    out = F.conv3d(x.data, w.data, b.data if b is not None else None, stride=stride, padding=pad)

    def bwd(g: torch.Tensor):
        gx, gw, gb = _conv_backward(
            g.contiguous(), x.data, w.data,
            [w.data.shape[0]] if b is not None else None,
            [stride] * 3, [pad] * 3, [1, 1, 1], False, [0, 0, 0], 1,
            [True, True, b is not None],
        )
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bwd)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Strided up-convolution; w: (Cin, Cout, k, k, k), kernel k == stride."""
    out = F.conv_transpose3d(x.data, w.data, b.data if b is not None else None, stride=stride)

    def bwd(g: torch.Tensor):
        gx, gw, gb = _conv_backward(
            g.contiguous(), x.data, w.data,
            [w.data.shape[1]] if b is not None else None,
            [stride] * 3, [0, 0, 0], [1, 1, 1], True, [0, 0, 0], 1,
            [True, True, b is not None],
        )
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bwd)


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) spatial standardization with learnable affine."""
    mu = x.data.mean(dim=_SPATIAL, keepdim=True)
    centered = x.data - mu
    var = (centered * centered).mean(dim=_SPATIAL, keepdim=True)
    inv = torch.rsqrt(var + eps)
    xhat = centered * inv
    c = x.data.shape[1]
    g_view = gain.data.view(1, c, 1, 1, 1)
    out = xhat * g_view + bias.data.view(1, c, 1, 1, 1)
    m = float(np.prod(x.data.shape[2:]))

    def bwd(g: torch.Tensor):
        d_xhat = g * g_view
        # standard normalization backward over the spatial axes
        sum_dxhat = d_xhat.sum(dim=_SPATIAL, keepdim=True)
        sum_dxhat_xhat = (d_xhat * xhat).sum(dim=_SPATIAL, keepdim=True)
        gx = inv * (d_xhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)
        g_gain = (g * xhat).sum(dim=(0, 2, 3, 4))
        g_bias = g.sum(dim=(0, 2, 3, 4))
        return (gx, g_gain, g_bias)

    return _node(out, (x, gain, bias), bwd)


def global_average_pool(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N, C) spatial mean."""
    out = x.data.mean(dim=_SPATIAL)
    m = float(np.prod(x.data.shape[2:]))

    def bwd(g: torch.Tensor):
        return (g.view(*g.shape, 1, 1, 1).expand(x.data.shape) / m,)

    return _node(out, (x,), bwd)


def mean_downsample(x: Tensor) -> Tensor:
    """2x mean pooling over the spatial axes."""
    out = F.avg_pool3d(x.data, kernel_size=2, stride=2)

    def bwd(g: torch.Tensor):
        up = g.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
        return (up / 8.0,)

    return _node(out, (x,), bwd)


def nearest_downsample(x: Tensor) -> Tensor:
    """2x nearest (strided) downsample over the spatial axes."""
    out = x.data[:, :, ::2, ::2, ::2].clone()

    def bwd(g: torch.Tensor):
        full = torch.zeros_like(x.data)
        full[:, :, ::2, ::2, ::2] = g
        return (full,)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors with seeded, order-deterministic initialization."""

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.seed = int(seed)
        self.dtype = dtype
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array), requires_grad=True, dtype=self.dtype)
        self._params[name] = t
        return t

    def conv(self, name: str, cin: int, cout: int, k: int, slope: float = 0.01) -> tuple[Tensor, Tensor]:
        """Kaiming fan-in weights + zero bias for a k^3 convolution."""
        fan_in = cin * k ** 3
        std = math.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
        w = self.add(f"{name}.w", self._rng.normal(0.0, std, size=(cout, cin, k, k, k)))
        b = self.add(f"{name}.b", np.zeros(cout))
        return w, b

    def transposed_conv(self, name: str, cin: int, cout: int, k: int = 2) -> tuple[Tensor, Tensor]:
        fan_in = cin * k ** 3
        std = math.sqrt(2.0 / fan_in)
        w = self.add(f"{name}.w", self._rng.normal(0.0, std, size=(cin, cout, k, k, k)))
        b = self.add(f"{name}.b", np.zeros(cout))
        return w, b

    def linear(self, name: str, fin: int, fout: int, slope: float = 0.01) -> tuple[Tensor, Tensor]:
        std = math.sqrt(2.0 / ((1.0 + slope ** 2) * fin))
        w = self.add(f"{name}.w", self._rng.normal(0.0, std, size=(fout, fin)))
        b = self.add(f"{name}.b", np.zeros(fout))
        return w, b

    def norm(self, name: str, c: int) -> tuple[Tensor, Tensor]:
        gain = self.add(f"{name}.gain", np.ones(c))
        bias = self.add(f"{name}.bias", np.zeros(c))
        return gain, bias

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_params(self, prefixes: tuple[str, ...] | None = None) -> int:
        total = 0
        for name, p in self._params.items():
            if prefixes is None or name.startswith(prefixes):
                total += p.data.numel()
        return total

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.numpy().copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            self._params[name].data = _as_torch(np.asarray(arr), self.dtype)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    name: str = "op",
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued graph against central differences.

    Inputs must be float64; the relative error per element uses
    ``|a - n| / max(1, |a|, |n|)`` so near-zero gradients are judged absolutely.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.data.is_contiguous():
            t.data = t.data.contiguous()  # perturbation below edits a flat view
        t.grad = None
    out = fn(*inputs)
    if out.data.numel() != 1:
        raise ValueError("grad_check requires a scalar-valued graph output")
    backward(out)
    max_err = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else torch.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = fn(*inputs).data.item()
            flat[i] = orig - step
            f_minus = fn(*inputs).data.item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic.reshape(-1)[i].item()
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_err = max(max_err, err)
    return GradCheckReport(op_name=name, max_rel_error=max_err, tolerance=tolerance)
