"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every operation as an append-only node list; tensors are
immutable values that optionally point at a node on the active tape.
The op set is the minimum needed to backpropagate through matrix-scaling
loops and small fully connected networks: elementwise arithmetic,
exp/log/relu/sqrt/square, 2-D matmul and transpose, sum/mean reductions,
and a pairwise squared-distance primitive with a hand-written adjoint.

Broadcasting follows numpy rules restricted to rank <= 2 (scalars,
row/column vectors against matrices); adjoints sum gradients back over
the broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import kernels

DIV_FLOOR = 1e-300


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """An input entry violates the operation's domain (index reported)."""


class TapeError(RuntimeError):
    """Misuse of the tape: detached/non-scalar root, tracked min, etc."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} arrays are not supported (shape {arr.shape})")
    return arr


class Parameter:
    """Named trainable array. Bind onto a tape with Tape.leaf_for."""

    __slots__ = ("name", "data")

    def __init__(self, data, name: str):
        self.data = _as_array(data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


class _Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence[int], backward_fn: Optional[Callable]):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Immutable dense array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "idx")

    def __init__(self, data, tape: Optional["Tape"] = None, idx: Optional[int] = None):
        self.data = _as_array(data)
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self.tape is None or self.tape.grads is None:
            return None
        return self.tape.grads[self.idx]

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None):
        return reduce_min(self, axis=axis)


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: Optional[list[Optional[np.ndarray]]] = None
        self._param_leaves: dict[Parameter, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, data, parents: Sequence[int], backward_fn) -> Tensor:
        self.nodes.append(_Node(op, tuple(parents), backward_fn))
        return Tensor(data, self, len(self.nodes) - 1)

    def leaf(self, data) -> Tensor:
        return self.record("leaf", data, (), None)

    def leaf_for(self, param: Parameter) -> Tensor:
        """Bind a parameter as a leaf, once per tape, so gradients accumulate."""
        t = self._param_leaves.get(param)
        if t is None:
            t = self.leaf(param.data)
            self._param_leaves[param] = t
        return t

    def clear(self):
        self.nodes = []
        self.grads = None
        self._param_leaves = {}

    def backward(self, root: Tensor) -> dict[Parameter, np.ndarray]:
        """Backpropagate from a scalar root; returns gradients per bound parameter."""
        if root.tape is None:
            raise TapeError("backward on a detached tensor")
        if root.tape is not self:
            raise TapeError("root was recorded on a different tape")
        if root.data.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root.idx] = np.ones_like(root.data)
        for idx in range(root.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward_fn is None:
                continue
            for pidx, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if grads[pidx] is None:
                    grads[pidx] = pg
                else:
                    grads[pidx] = grads[pidx] + pg
        self.grads = grads
        out: dict[Parameter, np.ndarray] = {}
        for param, t in self._param_leaves.items():
            if grads[t.idx] is not None:
                out[param] = grads[t.idx]
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise TapeError("operands were recorded on different tapes")
            tape = t.tape
    return tape


def _check_broadcast(sa, sb, op):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, forward, backward_maker) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, op)
    out = forward(a.data, b.data)
    tape = _result_tape(a, b)
    if tape is None:
        return Tensor(out)
    bwd = backward_maker(a.data, b.data, out)
    parents, slots = [], []
    if a.tape is not None:
        parents.append(a.idx)
        slots.append(0)
    if b.tape is not None:
        parents.append(b.idx)
        slots.append(1)
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        ga, gb = bwd(g)
        full = (None if ga is None else _unbroadcast(ga, a_shape),
                None if gb is None else _unbroadcast(gb, b_shape))
        return [full[s] for s in slots]

    return tape.record(op, out, parents, backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda av, bv, out: lambda g: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda av, bv, out: lambda g: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda av, bv, out: lambda g: (g * bv, g * av))


def _index_of(flat: int, shape) -> tuple:
    return tuple(int(i) for i in np.unravel_index(flat, shape)) if shape else ()


def div(a, b) -> Tensor:
    bv = as_tensor(b).data
    small = np.abs(bv) < DIV_FLOOR
    if small.any():
        idx = _index_of(int(np.argmax(small)), bv.shape)
        raise DomainError(f"div: divisor magnitude below {DIV_FLOOR} at index {idx}")
    return _binary("div", a, b, np.divide,
                   lambda av, bv, out: lambda g: (g / bv, -g * av / (bv * bv)))


def _check_domain(op: str, x: np.ndarray, bad: np.ndarray):
    if bad.any():
        idx = _index_of(int(np.argmax(bad)), x.shape)
        val = float(x[idx]) if x.ndim else float(x)
        raise DomainError(f"{op} {val!r} at index {idx}")


def _unary(op: str, a, forward, backward_maker) -> Tensor:
    a = as_tensor(a)
    out = forward(a.data)
    if a.tape is None:
        return Tensor(out)
    bwd = backward_maker(a.data, out)
    return a.tape.record(op, out, (a.idx,), lambda g: (bwd(g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_domain("exp: overflow for input", a.data, np.isinf(out))
    if a.tape is None:
        return Tensor(out)
    return a.tape.record("exp", out, (a.idx,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_domain("log: requires positive input, got", a.data, a.data <= 0.0)
    return _unary("log", a, np.log, lambda x, out: lambda g: g / x)


def neg(a) -> Tensor:
    return _unary("neg", a, np.negative, lambda x, out: lambda g: -g)


def relu(a) -> Tensor:
    # relu'(0) is taken as 0
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda x, out: lambda g: g * (x > 0.0))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _check_domain("sqrt: requires non-negative input, got", a.data, a.data < 0.0)

    def bwd_maker(x, out):
        pos = x > 0.0
        # subgradient 0 at exactly 0, mirroring the relu convention
        def bwd(g):
            return np.where(pos, g * 0.5 / np.where(pos, out, 1.0), 0.0)

        return bwd

    return _unary("sqrt", a, np.sqrt, bwd_maker)


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda x, out: lambda g: g * 2.0 * x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    tape = _result_tape(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.data, b.data
    parents, slots = [], []
    if a.tape is not None:
        parents.append(a.idx)
        slots.append(0)
    if b.tape is not None:
        parents.append(b.idx)
        slots.append(1)

    def backward_fn(g):
        full = (g @ bv.T, av.T @ g)
        return [full[s] for s in slots]

    return tape.record("matmul", out, parents, backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _unary("transpose", a, lambda x: x.T.copy(), lambda x, out: lambda g: g.T)


def _reduce_backward(in_shape, axis, keepdims, scale):
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, in_shape) * scale

    return bwd


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and axis >= a.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if a.tape is None:
        return Tensor(out)
    bwd = _reduce_backward(a.shape, axis, keepdims, 1.0)
    return a.tape.record("sum", out, (a.idx,), lambda g: (bwd(g),))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and axis >= a.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if a.tape is None:
        return Tensor(out)
    bwd = _reduce_backward(a.shape, axis, keepdims, 1.0 / count)
    return a.tape.record("mean", out, (a.idx,), lambda g: (bwd(g),))


def reduce_min(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.tape is not None:
        raise TapeError("min is an evaluation-only reduction; call detach() first")
    if axis is not None and axis >= a.data.ndim:
        raise ShapeError(f"min: axis {axis} out of range for shape {a.shape}")
    return Tensor(a.data.min(axis=axis))


def pairwise_sqdist(a, b) -> Tensor:
    """Matrix of squared Euclidean distances between rows of a and rows of b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: rows must share width, got {a.shape} and {b.shape}")
    out = kernels.pairwise_sqdist(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))
    tape = _result_tape(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.data, b.data
    parents, slots = [], []
    if a.tape is not None:
        parents.append(a.idx)
        slots.append(0)
    if b.tape is not None:
        parents.append(b.idx)
        slots.append(1)

    def backward_fn(g):
        # d[i,j] = sum_k (a[i,k]-b[j,k])^2
        ga = 2.0 * (av * g.sum(axis=1, keepdims=True) - g @ bv)
        gb = 2.0 * (bv * g.sum(axis=0)[:, None] - g.T @ av)
        full = (ga, gb)
        return [full[s] for s in slots]

    return tape.record("pairwise_sqdist", out, parents, backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    out = a.data.reshape(shape)
    if a.tape is None:
        return Tensor(out)
    in_shape = a.shape
    return a.tape.record("reshape", out, (a.idx,), lambda g: (g.reshape(in_shape),))


def take_row(a, j: int) -> Tensor:
    """Row j of a matrix as a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_row: expected a matrix, got shape {a.shape}")
    if not 0 <= j < a.shape[0]:
        raise ShapeError(f"take_row: row {j} out of range for shape {a.shape}")
    out = a.data[j].copy()
    if a.tape is None:
        return Tensor(out)
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[j] = g
        return (full,)

    return a.tape.record("take_row", out, (a.idx,), backward_fn)


def stack_scalars(values: Iterable, shape) -> Tensor:
    """Assemble scalar tensors/floats into an array of the given shape."""
    values = [as_tensor(v) for v in values]
    flat = np.array([float(v.data) for v in values]).reshape(shape)
    tape = _result_tape(*values)
    if tape is None:
        return Tensor(flat)
    tracked = [(pos, v.idx) for pos, v in enumerate(values) if v.tape is not None]
    parents = [idx for _, idx in tracked]
    positions = [pos for pos, _ in tracked]

    def backward_fn(g):
        gf = g.reshape(-1)
        return [np.asarray(gf[pos]) for pos in positions]

    return tape.record("stack", flat, parents, backward_fn)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"exp": exp, "log": log, "neg": neg, "relu": relu, "sqrt": sqrt, "square": square}
_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "min": reduce_min}


def binary_op(kind: str, a, b) -> Tensor:
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}")
    return _BINARY[kind](a, b)


def unary_op(kind: str, a) -> Tensor:
    if kind not in _UNARY:
        raise ValueError(f"unknown unary op {kind!r}")
    return _UNARY[kind](a)


def reduce(kind: str, a, axis=None, **kwargs) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    return _REDUCE[kind](a, axis=axis, **kwargs)


def adam_step(value, grad, m, v, t, lr, beta1, beta2, eps):
    """One Adam update with bias correction; returns (value, m, v), no aliasing."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a fixed parameter list; parameters absent from a gradient
    map are treated as zero-gradient (moments still decay)."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p: np.zeros_like(p.data) for p in self.params}
        self._v = {p: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[Parameter, np.ndarray]):
        self.t += 1
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            p.data, self._m[p], self._v[p] = adam_step(
                p.data, g, self._m[p], self._v[p], self.t,
                self.lr, self.beta1, self.beta2, self.eps)
