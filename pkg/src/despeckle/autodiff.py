"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is backed by numpy arrays in float32 or float64. Operations
record themselves onto the innermost active :class:`Tape` (a plain ordered
list of recorded steps); replaying the tape in reverse propagates gradients.
Only the operations the despeckling network and its composite loss need are
provided; there is no broadcasting beyond numpy's, no views of views, and
no graph optimization.

Every operation validates that its output is finite and raises
:class:`~despeckle.errors.NumericError` otherwise, so a diverging training
run fails at the op that produced the first NaN/Inf rather than three
layers later.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import NumericError, ShapeError, StateError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Dense real-valued array, optionally participating in gradient taping.

    ``data`` is the flat storage (any numpy shape), ``grad`` is populated by
    :meth:`Tape.backward` for tensors with ``requires_grad`` set. Image data
    uses the batch x channels x height x width layout.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class _TapeNode:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_tapes = _TapeStack()


def _current_tape() -> "Tape | None":
    return _tapes.stack[-1] if _tapes.stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are recorded. Independent tapes share no
    state, so disjoint tapes may run on different threads concurrently.
    """

    def __init__(self):
        self._nodes: list[_TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tapes.stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every participating tensor with d(root)/d(tensor).

        ``root`` must be a scalar produced by an operation recorded on this
        tape. Gradients accumulate additively over all paths; replay visits
        each recorded operation exactly once, in reverse recording order.
        """
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if id(root) not in self._produced:
            raise StateError("backward root was not produced on this tape")
        root._accumulate_grad(np.ones_like(root.data))
        for node in reversed(self._nodes):
            g_out = node.output.grad
            if g_out is None:
                continue
            grads = node.backward(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                _check_finite(g, "backward")
                t._accumulate_grad(g)


def backward(root: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(root)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], make_backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _current_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=recording)
    if recording:
        node = _TapeNode(inputs, out, make_backward())
        tape._nodes.append(node)
        tape._produced.add(id(out))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def make():
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return bw

    return _result(data, (a, b), make, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data - b.data

    def make():
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return bw

    return _result(data, (a, b), make, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def make():
        ad, bd = a.data, b.data

        def bw(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

        return bw

    return _result(data, (a, b), make, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data / b.data

    def make():
        ad, bd = a.data, b.data

        def bw(g):
            return (
                _unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape),
            )

        return bw

    return _result(data, (a, b), make, "div")


def neg(a: Tensor) -> Tensor:
    def make():
        def bw(g):
            return (-g,)

        return bw

    return _result(-a.data, (a,), make, "neg")


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def make():
        ad = a.data

        def bw(g):
            return (2.0 * ad * g,)

        return bw

    return _result(data, (a,), make, "square")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def make():
        def bw(g):
            return (g * data,)

        return bw

    return _result(data, (a,), make, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def make():
        ad = a.data

        def bw(g):
            return (g / ad,)

        return bw

    return _result(data, (a,), make, "log")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def make():
        def bw(g):
            return (g / (2.0 * data),)

        return bw

    return _result(data, (a,), make, "sqrt")


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    data = np.maximum(a.data, 0.0)

    def make():
        mask = a.data > 0.0

        def bw(g):
            return (g * mask,)

        return bw

    return _result(data, (a,), make, "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    data = np.maximum(a.data, floor)

    def make():
        mask = a.data > floor

        def bw(g):
            return (g * mask,)

        return bw

    return _result(data, (a,), make, "clamp_min")


def clamp_max(a: Tensor, ceil: float) -> Tensor:
    """Elementwise min(x, ceil); gradient passes only where x < ceil."""
    data = np.minimum(a.data, ceil)

    def make():
        mask = a.data < ceil

        def bw(g):
            return (g * mask,)

        return bw

    return _result(data, (a,), make, "clamp_max")


# ---------------------------------------------------------------------------
# reductions, shaping, slicing
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def make():
        shape = a.shape

        def bw(g):
            return (_expand_reduced(g, shape, axis, keepdims),)

        return bw

    return _result(data, (a,), make, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def make():
        shape = a.shape
        count = a.size if axis is None else a.data.size // data.size

        def bw(g):
            return (_expand_reduced(g, shape, axis, keepdims) / count,)

        return bw

    return _result(data, (a,), make, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def make():
        old = a.shape

        def bw(g):
            return (g.reshape(old),)

        return bw

    return _result(a.data.reshape(shape), (a,), make, "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing only: every output element maps to a distinct input element."""
    data = a.data[idx]

    def make():
        def bw(g):
            buf = np.zeros_like(a.data)
            buf[idx] += g
            return (buf,)

        return bw

    return _result(data, (a,), make, "getitem")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c * k * k, h * w), dtype=x.dtype)
    row = 0
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                cols[:, row, :] = xp[:, ci, ki : ki + h, kj : kj + w].reshape(b, h * w)
                row += 1
    return cols


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation with per-output-channel bias.

    ``input`` is (B, Cin, H, W), ``kernel`` is (Cout, Cin, K, K) with K odd,
    ``bias`` is (Cout,). Output spatial size equals input spatial size
    (zero padding of (K-1)/2 on each side).
    """
    if input.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d, got {input.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, K, K), got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    if k % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if input.shape[1] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, kernel expects {cin}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")

    b, _, h, w = input.shape
    pad = (k - 1) // 2
    cols = _im2col(input.data, k, pad)
    w_mat = kernel.data.reshape(cout, cin * k * k)
    out_data = np.matmul(w_mat, cols) + bias.data[None, :, None]
    out_data = out_data.reshape(b, cout, h, w)

    def make():
        saved_cols = cols

        def bw(g):
            g_mat = g.reshape(b, cout, h * w)
            d_w = np.matmul(g_mat, saved_cols.transpose(0, 2, 1)).sum(axis=0)
            d_bias = g.sum(axis=(0, 2, 3))
            d_cols = np.matmul(w_mat.T[None, :, :], g_mat)
            d_pad = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            row = 0
            for ci in range(cin):
                for ki in range(k):
                    for kj in range(k):
                        d_pad[:, ci, ki : ki + h, kj : kj + w] += d_cols[:, row, :].reshape(b, h, w)
                        row += 1
            d_input = d_pad[:, :, pad : pad + h, pad : pad + w]
            return d_input, d_w.reshape(kernel.shape), d_bias

        return bw

    return _result(out_data, (input, kernel, bias), make, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    momentum: float = 0.9,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Per-channel batch normalization over the (B, H, W) axes with affine.

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place as ``momentum * old + (1 - momentum) * batch``.
    In eval mode the running statistics are used as constants. Differentiable
    with respect to ``x``, ``gamma`` and ``beta``; built from primitive ops so
    the tape handles the backward pass.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine parameters must be ({c},)")
    if training:
        if b * h * w < 2:
            raise ShapeError("batch_norm training mode needs at least 2 values per channel")
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(square(centered), axis=(0, 2, 3), keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(c).astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(c).astype(running_var.dtype)
    else:
        mu = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype))
        var = Tensor(running_var.reshape(1, c, 1, 1).astype(x.dtype))
        centered = sub(x, mu)
    normalized = div(centered, sqrt(add(var, eps)))
    scale = reshape(gamma, (1, c, 1, 1))
    shift = reshape(beta, (1, c, 1, 1))
    return add(mul(normalized, scale), shift)


# ---------------------------------------------------------------------------
# extension point
# ---------------------------------------------------------------------------

def custom_op(inputs, out_data, backward, op: str = "custom") -> Tensor:
    """Record a caller-defined primitive.

    ``backward(grad_out)`` must return one gradient array (or None) per input,
    in order. Used for operations whose composite form would be wasteful.
    """
    return _result(np.asarray(out_data), tuple(inputs), lambda: backward, op)
