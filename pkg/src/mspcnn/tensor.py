"""Small reverse-mode autodiff library on top of numpy.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
order; :func:`backward` replays them in reverse.  Tensors created outside any
tape never record, which is how frozen networks and constant targets are
expressed.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


def get_default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record():
    """Suspend recording, e.g. while evaluating a frozen network for constant targets."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by '{op}'")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(op, inputs, out, backward_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data**exponent  # non-finite results are reported by _make
    return _make(
        "pow",
        out,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def tabs(a: Tensor) -> Tensor:
    # np.sign gives subgradient 0 at exactly 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(a.data[index]), (a,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    return _make(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def pad2d(a: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the last two axes at their far end."""
    widths = [(0, 0)] * (a.ndim - 2) + [(0, pad_bottom), (0, pad_right)]
    h, w = a.shape[-2:]
    return _make("pad2d", np.pad(a.data, widths), (a,), lambda g: (g[..., :h, :w],))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out + bias if bias is not None else out


# ---------------------------------------------------------------- convolution


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _conv_forward(x, w, stride, padding):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_transpose_forward(y, w, stride, padding, out_hw):
    n, o, ho, wo = y.shape
    _, c, k, _ = w.shape
    h, wd = out_hw
    buf = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=y.dtype)
    cols = np.tensordot(y, w, axes=([1], [0]))  # n, ho, wo, c, k, k
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return buf[:, :, padding : padding + h, padding : padding + wd]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation. ``x`` is (C,H,W) or (N,C,H,W); ``kernel`` is (O,C,k,k)."""
    x, single = _batched(as_tensor(x))
    kernel = as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[-1]
    h, w = x.shape[2:]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")
    out = _conv_forward(x.data, kernel.data, stride, padding)

    def back(g):
        gx = _conv_transpose_forward(g, kernel.data, stride, padding, (h, w))
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = _windows(xp, k, stride, g.shape[2], g.shape[3])
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    res = _make("conv2d", out, (x, kernel), back)
    if bias is not None:
        res = res + reshape(bias, (1, -1, 1, 1))
    return reshape(res, res.shape[1:]) if single else res


def conv2d_transpose(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_size: tuple[int, int] | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same (O,C,k,k) kernel; maps O channels to C.

    ``output_size`` resolves the ambiguity of strided convolution; by default the
    smallest size that ``conv2d`` maps onto the input shape is used.
    """
    x, single = _batched(as_tensor(x))
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"conv2d_transpose shape mismatch: input {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[-1]
    ho, wo = x.shape[2:]
    if output_size is None:
        output_size = ((ho - 1) * stride + k - 2 * padding, (wo - 1) * stride + k - 2 * padding)
    h, w = output_size
    if h < 1 or w < 1 or _conv_out(h, k, stride, padding) != ho or _conv_out(w, k, stride, padding) != wo:
        raise ValueError(
            f"conv2d_transpose: output size {output_size} inconsistent with input {x.shape}, kernel {kernel.shape}"
        )
    out = _conv_transpose_forward(x.data, kernel.data, stride, padding, (h, w))

    def back(g):
        gx = _conv_forward(g, kernel.data, stride, padding)
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = _windows(gp, k, stride, ho, wo)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    res = _make("conv2d_transpose", out, (x, kernel), back)
    if bias is not None:
        res = res + reshape(bias, (1, -1, 1, 1))
    return reshape(res, res.shape[1:]) if single else res


# ---------------------------------------------------------------- recurrent cell


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order in the stacked weights is input, forget, candidate, output.

    ``x`` is (m,) or (B,m); ``h``/``c`` are (d,) or (B,d); ``w_ih`` is (4d,m),
    ``w_hh`` is (4d,d), ``bias`` is (4d,).
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    d = w_hh.shape[1]
    if w_ih.shape != (4 * d, x.shape[-1]) or w_hh.shape != (4 * d, d) or bias.shape != (4 * d,):
        raise ValueError(
            f"lstm_cell dimension mismatch: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}"
        )
    if h.shape[-1] != d or c.shape[-1] != d:
        raise ValueError(f"lstm_cell state size {h.shape}/{c.shape} does not match hidden size {d}")
    single = x.ndim == 1
    if single:
        x, h, c = reshape(x, (1, -1)), reshape(h, (1, -1)), reshape(c, (1, -1))
    gates = linear(x, w_ih) + linear(h, w_hh) + bias
    i = sigmoid(gates[:, 0:d])
    f = sigmoid(gates[:, d : 2 * d])
    g = tanh(gates[:, 2 * d : 3 * d])
    o = sigmoid(gates[:, 3 * d : 4 * d])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    if single:
        return reshape(h_new, (d,)), reshape(c_new, (d,))
    return h_new, c_new


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; gradients are accumulated into each leaf's ``.grad``.

    Returns a map from every requires-grad leaf reached to its gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(f"{node.op} (backward)", gi)
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.is_leaf:
                leaves[key] = inp
    result = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}' at step {state.step + 1}")
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step` for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


# ---------------------------------------------------------------- helpers


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def grad_check(
    fn: Callable[..., Tensor], point, step: float = 1e-3, sample: int | None = None, seed: int = 0, floor: float = 1e-8
) -> float:
    """Max over coordinates of |autodiff - central difference| / (|central difference| + floor).

    ``point`` is an array or a sequence of arrays, one per positional argument of ``fn``.
    With ``sample`` set, only that many randomly chosen coordinates per argument are probed.
    """
    rng = np.random.default_rng(seed)
    arrays = [point] if isinstance(point, np.ndarray) else list(point)
    inputs = [Tensor(np.array(a), requires_grad=True) for a in arrays]
    try:
        with Tape() as tape:
            loss = fn(*inputs)
        backward(loss, tape)
    except FloatingPointError:
        return math.nan
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = range(flat.size) if sample is None or sample >= flat.size else rng.choice(flat.size, sample, replace=False)
        for idx in coords:
            orig = flat[idx]
            try:
                flat[idx] = orig + step
                f_plus = float(fn(*inputs).data)
                flat[idx] = orig - step
                f_minus = float(fn(*inputs).data)
            except FloatingPointError:
                return math.nan
            finally:
                flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(float(analytic.reshape(-1)[idx]) - fd) / (abs(fd) + floor)
            if math.isnan(err):
                return math.nan
            worst = max(worst, err)
    return worst


def parameters_snapshot(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]
