"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what fully connected classifiers need is here: matrix products,
a handful of element-wise ops, bias broadcasting, reductions and a fused
softmax cross-entropy.  Values live in C-ordered (row-major) numpy arrays.

Usage::

    W = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(relu(matmul(x, W)))
    grads = tape.backward(loss)      # {W: dloss/dW}
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataFormatError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "as_tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "add_bias",
    "sum_all",
    "mean_all",
    "softmax_cross_entropy",
]


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs.

    ``data`` is always a C-contiguous float64 ndarray; ``shape`` mirrors it.
    Leaves created with ``requires_grad=True`` receive a ``grad`` after
    :meth:`GradTape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_traced", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._traced = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._traced = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_active_tapes: list["GradTape"] = []


class GradTape:
    """Records operations executed inside its ``with`` block.

    Ops append nodes in execution order, which is already a topological
    order, so :meth:`backward` walks the list once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, _Node] = {}

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        node = _Node(out, parents, backward)
        self.nodes.append(node)
        self._produced[id(out)] = node

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of scalar ``loss`` w.r.t. every ``requires_grad`` leaf.

        Leaf gradients are also stored on ``leaf.grad`` (overwritten, not
        accumulated across calls).  Returns a dict keyed by leaf identity.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced under this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for parent, g in zip(node.parents, node.backward(g_out)):
                if g is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if parent.requires_grad and key not in self._produced:
                    leaves[key] = parent

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = np.ascontiguousarray(grads[key], dtype=np.float64)
            leaf.grad = g
            result[leaf] = g
        return result


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._traced


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")
    return arr


def _emit(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(_finite(value, op))
    if _active_tapes and any(_needs_grad(p) for p in parents):
        out._traced = True
        _active_tapes[-1]._record(out, parents, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def backward(g):
        return (g @ bv.T if need_a else None), (av.T @ g if need_b else None)

    return _emit("matmul", av @ bv, (a, b), backward)


# ----------------------------------------------------------- element-wise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = a.data > 0.0
    out = np.where(active, a.data, 0.0)
    return _emit("relu", out, (a,), lambda g: (g * active,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids exp overflow for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of add, sub, mul, relu, sigmoid, tanh by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes a single operand")
        return _UNARY[op](a)
    raise ContractError(f"unknown element-wise op {op!r}")


# ------------------------------------------------ broadcasting, reductions


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an (m, n) tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(
        "sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit(
        "mean",
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(shape, float(g) / n),),
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Stabilised by subtracting each row's maximum.  The gradient w.r.t.
    logits is ``(softmax - onehot) / batch``.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {z.shape}")
    y = np.asarray(labels)
    m, c = z.shape
    if y.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {y.shape} labels for {m} rows")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integer class indices")
    if m and (y.min() < 0 or y.max() >= c):
        raise DataFormatError(f"label outside [0, {c}) in cross-entropy")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    nll = log_norm - shifted[rows, y]
    loss = np.asarray(nll.mean())

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, y] -= 1.0
        return (p * (float(g) / m),)

    return _emit("softmax_cross_entropy", loss, (logits,), backward)
