"""Minimal reverse-mode differentiable tensor engine.

Every value is a :class:`Tensor` wrapping a float64 numpy array. Operations
build a graph of parent links plus an adjoint closure; :func:`gradient_of`
walks that graph in reverse topological order and accumulates gradients
into a :class:`GradientContext`.

Only the operations needed by LeNet-5 / AlexNet style networks are provided.
Shapes must match exactly for elementwise operations; the one exception is a
python scalar operand, which is treated as a constant.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "NumericError",
    "Tensor",
    "GradientContext",
    "SeededRng",
    "gradient_of",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "square",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "flatten",
    "linear",
    "conv2d",
    "maxpool2d",
    "softmax",
    "softmax_cross_entropy",
]

_GRAPH_ENABLED = True

# Above this value of beta*x softplus(x) is x to double precision.
SOFTPLUS_THRESHOLD = 30.0


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf, or received an out-of-domain input."""


class Tensor:
    """Dense float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording adjoints (saves the memory held by closures)."""
    global _GRAPH_ENABLED
    prev, _GRAPH_ENABLED = _GRAPH_ENABLED, False
    try:
        yield
    finally:
        _GRAPH_ENABLED = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    """Wrap an op's output, checking finiteness and wiring the adjoint."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = _GRAPH_ENABLED and any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    # only scalar <-> array mixing is allowed, so a full sum is enough
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    q = a.data / b.data
    return _result(q, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * q / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    r = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / r,)

    return _result(r, (a,), backward, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x, beta=1.0):
    bx = beta * x
    big = bx > SOFTPLUS_THRESHOLD
    return np.where(big, x, np.log1p(np.exp(np.where(big, 0.0, bx))) / beta)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a, beta: float = 1.0) -> Tensor:
    """``(1/beta) * log(1 + exp(beta * x))`` with an overflow-safe linear branch."""
    if beta <= 0:
        raise ValueError("softplus beta must be positive")
    a = as_tensor(a)
    return _result(_softplus(a.data, beta), (a,),
                   lambda g: (g * _sigmoid(beta * a.data),), "softplus")


# --- reductions and reshapes -----------------------------------------------


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "reduce_sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


# --- layers ----------------------------------------------------------------


def linear(x, weight) -> Tensor:
    """``x @ weight.T`` for x of shape (M, F_in) and weight (F_out, F_in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        return gx, gw

    return _result(out, (x, weight), backward, "linear")


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """(M, C, H, W) -> (M*H'*W', C*kh*kw) patch matrix, row-major in (c, i, j)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    m, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(m * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation (no kernel flip), no bias.

    x: (M, C_in, H, W); kernel: (C_out, C_in, kH, kW) -> (M, C_out, H', W').
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d operands, got {x.shape}, {kernel.shape}")
    m, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError("conv2d: kernel larger than padded input")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(co, -1)
    out = (cols @ kmat.T).reshape(m, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(m, ho, wo, c, kh, kw)
            hp, wp = h + 2 * padding, w + 2 * padding
            gpad = np.zeros((m, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gpad[:, :, padding:padding + h, padding:padding + w]
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped. Ties route the gradient to the first element of the
    window in row-major order."""
    x = as_tensor(x)
    if window != stride:
        raise DimensionError("maxpool2d supports window == stride only")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-d input, got {x.shape}")
    m, c, h, w = x.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} smaller than window")
    k = window
    blocks = (x.data[:, :, :ho * k, :wo * k]
              .reshape(m, c, ho, k, wo, k)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(m, c, ho, wo, k * k))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((m, c, ho, wo, k * k))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(m, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(m, c, ho * k, wo * k)
        gx = np.zeros(x.shape)
        gx[:, :, :ho * k, :wo * k] = gb
        return (gx,)

    return _result(out, (x,), backward, "maxpool2d")


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a (M, C) array or tensor (no graph recorded)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]`` via log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    m, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / m),)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# --- gradients -------------------------------------------------------------


class GradientContext:
    """Gradients accumulated per parameter tensor, keyed by identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._params: dict[int, Tensor] = {}

    def accumulate(self, param: Tensor, grad: np.ndarray):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
        key = id(param)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad.copy()
            self._params[key] = param

    def __getitem__(self, param: Tensor) -> np.ndarray:
        return self._grads[id(param)]

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._grads

    def get(self, param: Tensor, default=None):
        return self._grads.get(id(param), default)

    def zero(self):
        self._grads.clear()
        self._params.clear()


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradient_of(output: Tensor, parameters, context: GradientContext | None = None) -> list:
    """Exact reverse-mode gradients of a scalar ``output`` w.r.t. ``parameters``.

    Gradients are added into ``context`` (a fresh one if omitted) and the list
    of arrays for ``parameters`` is returned in order. Raises ``ValueError``
    when a parameter does not influence the output.
    """
    if output.size != 1:
        raise DimensionError(f"gradient_of needs a scalar output, got shape {output.shape}")
    parameters = list(parameters)
    context = GradientContext() if context is None else context
    if not output.requires_grad:
        raise ValueError("output does not depend on any parameter")

    grads = {id(output): np.ones(output.shape)}
    wanted = {id(p) for p in parameters}
    reached = set()
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            context.accumulate(node, g)
            reached.add(id(node))
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    missing = [p for p in parameters if id(p) not in reached]
    if missing:
        names = ", ".join(p.name or repr(p) for p in missing)
        raise ValueError(f"parameters not reachable from output: {names}")
    return [context[p] for p in parameters]


class SeededRng:
    """Deterministic random stream: numpy ``PCG64`` bit generator with numpy's
    ziggurat standard-normal sampler. The algorithm is fixed so a seed always
    reproduces the same draws."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream identified by ``key``."""
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64([self.seed, int(key)]))
        return child

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict):
        self._gen.bit_generator.state = state
