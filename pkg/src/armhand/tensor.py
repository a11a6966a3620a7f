"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, kinematic chains, losses) is expressed in
the operations defined here. Each operation records its inputs on a tape;
``Tensor.backward()`` replays the tape in reverse topological order and
accumulates gradients on every tensor that requires them.

Conventions:
  * storage is always row-major ``numpy.float64``
  * gradients accumulate across backward calls; call ``zero_grad`` between steps
  * elementwise arithmetic demands exact shape agreement (scalars excepted);
    broadcasting only happens through the explicit ``add_bias`` /
    ``broadcast_add`` operations and batched ``matmul``
  * tensors are immutable once created, except for gradient accumulation
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "matmul",
    "add_bias",
    "broadcast_add",
    "concat",
    "stack",
    "absolute",
    "relu",
    "gelu",
    "leaky_relu",
    "sigmoid",
    "log",
    "exp",
    "sqrt",
    "clamp_min",
    "softmax",
    "layer_norm",
    "conv1d",
    "dropout",
    "embedding",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated preconditions."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """N-d float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction of op results ------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result; records the tape edge only when grads are live."""
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, severed from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar onto every requires_grad ancestor."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "add")
            data = self.data + other.data
            a, b = self, other

            def back(g):
                _accumulate(a, g)
                _accumulate(b, g)

            return Tensor._from_op(data, (a, b), back)
        c = float(other)
        a = self

        def back(g):
            _accumulate(a, g)

        return Tensor._from_op(self.data + c, (a,), back)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            _accumulate(a, -g)

        return Tensor._from_op(-self.data, (a,), back)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "sub")
            a, b = self, other

            def back(g):
                _accumulate(a, g)
                _accumulate(b, -g)

            return Tensor._from_op(a.data - b.data, (a, b), back)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "mul")
            a, b = self, other

            def back(g):
                _accumulate(a, g * b.data)
                _accumulate(b, g * a.data)

            return Tensor._from_op(a.data * b.data, (a, b), back)
        c = float(other)
        a = self

        def back(g):
            _accumulate(a, g * c)

        return Tensor._from_op(self.data * c, (a,), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "div")
            a, b = self, other

            def back(g):
                _accumulate(a, g / b.data)
                _accumulate(b, -g * a.data / (b.data * b.data))

            return Tensor._from_op(a.data / b.data, (a, b), back)
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.data.shape
        data = a.data.reshape(shape)

        def back(g):
            _accumulate(a, g.reshape(orig))

        return Tensor._from_op(data, (a,), back)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))

        def back(g):
            _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

        return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), back)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(*axes)

    def __getitem__(self, key) -> "Tensor":
        a = self
        data = a.data[key]
        if np.isscalar(data) or data.ndim == 0:
            data = np.asarray(data)
        else:
            data = np.ascontiguousarray(data)
        advanced = _has_advanced_index(key)

        def back(g):
            if not a.requires_grad:
                return
            buf = np.zeros_like(a.data)
            if advanced:
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            _accumulate(a, buf)

        return Tensor._from_op(data, (a,), back)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            _accumulate(a, _spread_reduction(g, a.data.shape, axis, keepdims))

        return Tensor._from_op(np.asarray(data), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else _axis_count(a.data.shape, axis)

        def back(g):
            _accumulate(a, _spread_reduction(g, a.data.shape, axis, keepdims) / count)

        return Tensor._from_op(np.asarray(data), (a,), back)


# -- helpers --------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _has_advanced_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _spread_reduction(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        expanded = list(g.shape)
        for ax in sorted(axes):
            expanded.insert(ax, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, shape).copy()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcast when producing g."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- construction ----------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading batch axes (numpy semantics).

    Both operands must be at least 2-d; inner extents must agree. Leading
    axes broadcast, which is how shared weight matrices apply across a batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree between {a.shape} and {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return Tensor._from_op(data, (a, b), back)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the trailing axis of x."""
    if bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"add_bias: bias shape {bias.shape} does not match trailing axis of {x.shape}")
    data = x.data + bias.data

    def back(g):
        _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor._from_op(data, (x, bias), back)


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add with full numpy broadcasting, requested explicitly."""
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(
            f"broadcast_add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    del out_shape
    return Tensor._from_op(data, (a, b), back)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.data.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, n in zip(parts, extents):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(idx)])
            offset += n

    return Tensor._from_op(data, tuple(parts), back)


def stack(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        for i, p in enumerate(parts):
            _accumulate(p, np.take(g, i, axis=axis))

    return Tensor._from_op(data, tuple(parts), back)


# -- activations and pointwise functions -------------------------------------


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)  # subgradient 0 at the kink

    def back(g):
        _accumulate(x, g * sign)

    return Tensor._from_op(np.abs(x.data), (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accumulate(x, g * mask)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), back)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accumulate(x, g * np.where(mask, 1.0, slope))

    return Tensor._from_op(np.where(mask, x.data, slope * x.data), (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return Tensor._from_op(x.data * cdf, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        _accumulate(x, g * s * (1.0 - s))

    return Tensor._from_op(s, (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, g / x.data)

    return Tensor._from_op(np.log(x.data), (x,), back)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def back(g):
        _accumulate(x, g * e)

    return Tensor._from_op(e, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)

    def back(g):
        # guard the derivative at 0 (subgradient 0 keeps minima stable)
        _accumulate(x, g / (2.0 * np.maximum(r, 1e-12)))

    return Tensor._from_op(r, (x,), back)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor

    def back(g):
        _accumulate(x, g * mask)

    return Tensor._from_op(np.maximum(x.data, floor), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, s * (g - inner))

    return Tensor._from_op(s, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm: trailing axis is empty")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def back(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            mean_g = gx_hat.mean(axis=-1, keepdims=True)
            mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (gx_hat - mean_g - xhat * mean_gx))

    return Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias), back)


# -- temporal convolution ------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str | int = "same") -> Tensor:
    """Convolve along the time axis.

    x: (T, c_in) or (batch, T, c_in); kernel: (width, c_in, c_out);
    bias: (c_out,). "same" padding preserves T. Returns (..., T_out, c_out).
    """
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be (width, c_in, c_out), got {kernel.shape}")
    width, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(
            f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in} "
            f"(input {x.shape}, kernel {kernel.shape})")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias must have shape ({c_out},), got {bias.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be 2-d or 3-d, got {x.shape}")
    t_in = xd.shape[1]
    if padding == "same":
        pad_l = (width - 1) // 2
        pad_r = width - 1 - pad_l
    else:
        pad_l = pad_r = int(padding)
    t_out = t_in + pad_l + pad_r - width + 1
    if t_out < 1:
        raise ShapeError(
            f"conv1d: kernel width {width} exceeds padded length {t_in + pad_l + pad_r}")
    xp = np.pad(xd, ((0, 0), (pad_l, pad_r), (0, 0)))
    out = np.broadcast_to(bias.data, (xd.shape[0], t_out, c_out)).copy()
    kd = kernel.data
    for k in range(width):
        out += xp[:, k:k + t_out, :] @ kd[k]

    def back(g):
        gb = g[None] if (squeeze and g.ndim == 2) else g
        if bias.requires_grad:
            _accumulate(bias, gb.sum(axis=(0, 1)))
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            gflat = gb.reshape(-1, c_out)
            for k in range(width):
                gk[k] = xp[:, k:k + t_out, :].reshape(-1, c_in).T @ gflat
            _accumulate(kernel, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[:, k:k + t_out, :] += gb @ kd[k].T
            gx = gxp[:, pad_l:pad_l + t_in, :]
            _accumulate(x, gx[0] if squeeze else gx)

    data = out[0] if squeeze else out
    return Tensor._from_op(data, (x, kernel, bias), back)


# -- stochastic / lookup ops --------------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; training-mode only. rate = 0 is the identity."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def back(g):
        _accumulate(x, g * keep)

    return Tensor._from_op(x.data * keep, (x,), back)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup into a parameter table with scatter-add gradients."""
    idx = np.asarray(indices)
    data = table.data[idx]

    def back(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            _accumulate(table, buf)

    return Tensor._from_op(np.ascontiguousarray(data), (table,), back)
