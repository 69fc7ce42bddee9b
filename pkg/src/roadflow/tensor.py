"""Minimal dense tensor with reverse-mode automatic differentiation.

Float64 numpy arrays wrapped in a tape of backward closures, plus an Adam
optimizer.  Only the operations the forecasting model needs are provided:
elementwise arithmetic, matmul over the trailing two axes (leading axes
broadcast), shape manipulation, relu, layer norm, a time-axis conv1d, and
the reductions used as losses.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from roadflow.errors import ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # callers pass g already reduced to self.shape; copy on first touch
        # (g may alias a child's grad buffer) instead of zeroing a buffer
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar loss; grads accumulate until zeroed."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _node(self.data + other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        out._backward = bwd
        return out

    def __sub__(self, other):
        other = _as_tensor(other)
        out = _node(self.data - other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        out._backward = bwd
        return out

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _node(self.data * other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = bwd
        return out

    def __neg__(self):
        out = _node(-self.data, (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = bwd
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __pow__(self, p: float):
        out = _node(self.data**p, (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1))

        out._backward = bwd
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner mismatch: {self.shape} @ {other.shape}")
        out = _node(np.matmul(self.data, other.data), (self, other))

        def bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.shape))

        out._backward = bwd
        return out

    # -- shape -----------------------------------------------------------

    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        old = self.shape
        out = _node(self.data.reshape(shape), (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        out._backward = bwd
        return out

    def permute(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        inv = np.argsort(axes)
        out = _node(self.data.transpose(axes), (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        out._backward = bwd
        return out

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)

        out._backward = bwd
        return out

    def pad_axis(self, axis: int, before: int, after: int):
        """Zero-pad one axis."""
        widths = [(0, 0)] * self.data.ndim
        widths[axis] = (before, after)
        out = _node(np.pad(self.data, widths), (self,))
        sl = [slice(None)] * self.data.ndim
        sl[axis] = slice(before, before + self.shape[axis])
        sl = tuple(sl)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g[sl])

        out._backward = bwd
        return out

    # -- nonlinearities and reductions ------------------------------------

    def relu(self):
        mask = self.data > 0
        out = _node(self.data * mask, (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        out._backward = bwd
        return out

    def abs(self):
        sign = np.sign(self.data)
        out = _node(np.abs(self.data), (self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * sign)

        out._backward = bwd
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.shape

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, shape).copy())

        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


# -- composite ops --------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing channel axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + Tensor(eps)) ** -0.5) * gain + bias


def conv1d_time(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """1-D convolution along axis 1 of a (B, T, N, C_in) tensor.

    ``weight`` has shape (K, C_in, C_out); each node's time series is
    convolved independently.  ``same`` keeps T via zero padding, ``valid``
    yields T - K + 1 steps.
    """
    k = weight.shape[0]
    t = x.shape[1]
    if k > t:
        raise ShapeError(f"kernel width {k} exceeds time length {t}")
    if padding == "same":
        before = (k - 1) // 2
        xp = x.pad_axis(1, before, k - 1 - before)
        t_out = t
    elif padding == "valid":
        xp = x
        t_out = t - k + 1
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    out = None
    for i in range(k):
        term = xp[:, i : i + t_out] @ weight[i]
        out = term if out is None else out + term
    return out + bias


def absolute_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference, a scalar."""
    if pred.shape != target.shape:
        raise ShapeError(f"absolute_error shapes differ: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference, a scalar."""
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return (d * d).mean()


# -- parameters and optimizer ----------------------------------------------


class Parameter:
    """Named trainable tensor with Adam moment buffers."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def adam_step(
    params: list[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; grads are left in place."""
    for p in params:
        if p.tensor.grad is None:
            raise ShapeError(f"parameter {p.name} has no gradient")
        g = p.tensor.grad
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1**p.step)
        v_hat = p.v / (1 - beta2**p.step)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


# -- checkpointing ----------------------------------------------------------


def save_checkpoint(params: list[Parameter], out_dir: str | Path, step: int = 0) -> None:
    """meta.json (names, shapes, step) + one little-endian blob per parameter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"step": step, "params": []}
    for i, p in enumerate(params):
        fname = f"param_{i:03d}.bin"
        p.tensor.data.astype("<f8").tofile(out_dir / fname)
        meta["params"].append({"name": p.name, "shape": list(p.tensor.data.shape), "file": fname})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(params: list[Parameter], in_dir: str | Path) -> int:
    """Load blobs into ``params`` by name; returns the saved step."""
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "meta.json").read_text())
    by_name = {p.name: p for p in params}
    for entry in meta["params"]:
        p = by_name[entry["name"]]
        data = np.fromfile(in_dir / entry["file"], dtype="<f8").reshape(entry["shape"])
        if data.shape != p.tensor.data.shape:
            raise ShapeError(f"checkpoint shape mismatch for {p.name}")
        p.tensor.data = data
    return meta["step"]
