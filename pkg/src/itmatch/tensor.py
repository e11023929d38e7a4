"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation graph is kept as parent links plus one backward closure per
node and is rebuilt on every forward evaluation; nothing is retained
between evaluations.  ``backward`` replays the graph once in reverse
topological order and returns a gradient for every named parameter.
``finite_diff_grad`` is the independent central-difference oracle used to
verify the tape; it never touches the graph machinery.

Broadcasting is deliberately narrow.  Binary operations accept exactly:

* two tensors of equal shape,
* a matrix ``(n, d)`` with a trailing vector ``(d,)`` broadcast across
  its rows,
* a tensor with a plain Python number (treated as a constant).

Every other shape pair raises :class:`DimensionError`; nothing is ever
reshaped silently.  All storage is 64-bit floats and result arrays are
frozen (read-only) on creation, so tensors behave as immutable values.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Immutable dense float64 array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        data.flags.writeable = False
        self.data = data
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple] | None = None

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
        if self.data.shape != ():
            raise ContractError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.data.shape))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones(t.data.shape))


# --- graph plumbing ---------------------------------------------------------


def _result(data, parents: tuple[Tensor, ...] = (), backward=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    arr.flags.writeable = False
    out.data = arr
    out.requires_grad = backward is not None
    out._parents = parents if backward is not None else ()
    out._backward = backward
    return out


def _tracking(*operands) -> bool:
    if not _grad_enabled:
        return False
    for op in operands:
        if isinstance(op, Tensor) and op.requires_grad:
            return True
    return False


def _binary_operand(a: Tensor, b):
    """Validate the documented broadcast rule and return b's raw value."""
    if isinstance(b, (int, float)):
        return float(b)
    if not isinstance(b, Tensor):
        raise ContractError(f"expected Tensor or number, got {type(b).__name__}")
    if a.data.shape == b.data.shape:
        return b.data
    if a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]:
        return b.data
    raise DimensionError(
        f"shapes {a.data.shape} and {b.data.shape} are neither equal nor "
        "a (rows, d) with (d,) row-wise broadcast"
    )


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    # the only sanctioned mismatch: gradient of a trailing vector that was
    # broadcast across matrix rows
    return g.sum(axis=0)


# --- elementwise binary ops -------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b_val = _binary_operand(a, b)
    out = a.data + b_val
    if not _tracking(a, b):
        return _result(out)
    if isinstance(b, Tensor):
        def backward_fn(g):
            return (g, _unbroadcast(g, b.data.shape))
        return _result(out, (a, b), backward_fn)

    def backward_fn(g):
        return (g,)
    return _result(out, (a,), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b_val = _binary_operand(a, b)
    out = a.data - b_val
    if not _tracking(a, b):
        return _result(out)
    if isinstance(b, Tensor):
        def backward_fn(g):
            return (g, -_unbroadcast(g, b.data.shape))
        return _result(out, (a, b), backward_fn)

    def backward_fn(g):
        return (g,)
    return _result(out, (a,), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b_val = _binary_operand(a, b)
    out = a.data * b_val
    if not _tracking(a, b):
        return _result(out)
    if isinstance(b, Tensor):
        def backward_fn(g):
            return (g * b.data, _unbroadcast(g * a.data, b.data.shape))
        return _result(out, (a, b), backward_fn)

    def backward_fn(g):
        return (g * b_val,)
    return _result(out, (a,), backward_fn)


# --- elementwise unary ops --------------------------------------------------


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (2.0 * a.data * g,)
    return _result(out, (a,), backward_fn)


def _sigmoid_values(x: Array) -> Array:
    # exp(-|x|) never overflows; both branches share it
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.data)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (out * (1.0 - out) * g,)
    return _result(out, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (out * g,)
    return _result(out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (g * (a.data > 0.0),)
    return _result(out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return ((1.0 - out * out) * g,)
    return _result(out, (a,), backward_fn)


# --- reductions ---------------------------------------------------------------


def _check_axis(a: Tensor, axis) -> None:
    if axis is None:
        return
    if not isinstance(axis, int) or axis < 0 or axis >= a.data.ndim:
        raise DimensionError(f"axis {axis!r} invalid for shape {a.data.shape}")


def _expand_reduced(g, shape: tuple[int, ...], axis) -> Array:
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _check_axis(a, axis)
    out = np.sum(a.data, axis=axis)
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape

    def backward_fn(g):
        return (_expand_reduced(g, shape, axis),)
    return _result(out, (a,), backward_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    out = np.mean(a.data, axis=axis)
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward_fn(g):
        return (_expand_reduced(np.asarray(g) / count, shape, axis),)
    return _result(out, (a,), backward_fn)


def amax(a: Tensor, axis: int | None = None) -> Tensor:
    """Maximum reduction; ties route the gradient to the lowest index."""
    _check_axis(a, axis)
    out = np.max(a.data, axis=axis)
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        if axis is None:
            grad.ravel()[np.argmax(a.data)] = float(np.asarray(g))
        else:
            idx = np.argmax(a.data, axis=axis)
            np.put_along_axis(
                grad,
                np.expand_dims(idx, axis),
                np.expand_dims(np.asarray(g), axis),
                axis,
            )
        return (grad,)
    return _result(out, (a,), backward_fn)


def l2norm(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape
    out_arr = np.asarray(out)

    def backward_fn(g):
        # a zero slice has zero gradient here (its entries are all zero);
        # the substituted denominator only avoids 0/0
        denom = np.where(out_arr == 0.0, 1.0, out_arr)
        return (a.data * _expand_reduced(np.asarray(g) / denom, shape, axis),)
    return _result(out, (a,), backward_fn)


ELEMENTWISE_UNARY = {
    "square": square,
    "sigmoid": sigmoid,
    "exp": exp,
    "relu": relu,
    "tanh": tanh,
}

ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}

REDUCE_OPS = {"sum": sum, "mean": mean, "max": amax, "l2norm": l2norm}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    if op in ELEMENTWISE_BINARY:
        if b is None:
            raise ContractError(f"elementwise '{op}' needs two operands")
        return ELEMENTWISE_BINARY[op](a, b)
    if op in ELEMENTWISE_UNARY:
        if b is not None:
            raise ContractError(f"elementwise '{op}' takes one operand")
        return ELEMENTWISE_UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    if op not in REDUCE_OPS:
        raise ContractError(f"unknown reduce op {op!r}")
    return REDUCE_OPS[op](a, axis)


# --- structural ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(
            f"matmul supports 1-D and 2-D operands, got {ad.shape} x {bd.shape}"
        )
    if ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd
    if not _tracking(a, b):
        return _result(out)

    def backward_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return (g @ bd.T, ad.T @ g)
        if ad.ndim == 2 and bd.ndim == 1:
            return (np.outer(g, bd), ad.T @ g)
        if ad.ndim == 1 and bd.ndim == 2:
            return (bd @ g, np.outer(ad, g))
        return (np.asarray(g) * bd, np.asarray(g) * ad)
    return _result(out, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.data.shape}")
    out = a.data.T
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (g.T,)
    return _result(out, (a,), backward_fn)


def take(a: Tensor, index: int) -> Tensor:
    """Row i of a matrix, or entry i of a vector."""
    if a.data.ndim not in (1, 2):
        raise DimensionError(f"take needs a vector or matrix, got shape {a.data.shape}")
    n = a.data.shape[0]
    if not 0 <= index < n:
        raise DimensionError(f"take index {index} out of range for shape {a.data.shape}")
    out = np.asarray(a.data[index])
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        grad[index] = g
        return (grad,)
    return _result(out, (a,), backward_fn)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather matrix rows; repeated indices accumulate gradient."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_rows needs a matrix, got shape {a.data.shape}")
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("take_rows needs a non-empty 1-D index list")
    n = a.data.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise DimensionError(f"take_rows index out of range for {n} rows")
    out = a.data[idx]
    if not _tracking(a):
        return _result(out)
    shape = a.data.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)
    return _result(out, (a,), backward_fn)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("stack needs at least one tensor")
    shape0 = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape0:
            raise DimensionError(f"stack shape mismatch: {shape0} vs {p.data.shape}")
    out = np.stack([p.data for p in parts])
    if not _tracking(*parts):
        return _result(out)

    def backward_fn(g):
        return tuple(g[i] for i in range(len(parts)))
    return _result(out, parts, backward_fn)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate vectors (as single rows) and matrices along axis 0."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("vstack needs at least one tensor")
    cols = None
    for p in parts:
        if p.data.ndim not in (1, 2):
            raise DimensionError(f"vstack parts must be 1-D or 2-D, got {p.data.shape}")
        c = p.data.shape[-1]
        if cols is None:
            cols = c
        elif c != cols:
            raise DimensionError(f"vstack column mismatch: {cols} vs {c}")
    out = np.vstack([p.data for p in parts])
    if not _tracking(*parts):
        return _result(out)
    row_counts = [1 if p.data.ndim == 1 else p.data.shape[0] for p in parts]

    def backward_fn(g):
        grads = []
        offset = 0
        for p, rows in zip(parts, row_counts):
            chunk = g[offset] if p.data.ndim == 1 else g[offset:offset + rows]
            grads.append(chunk)
            offset += rows
        return tuple(grads)
    return _result(out, parts, backward_fn)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a matrix by scalar s[i]."""
    if a.data.ndim != 2 or s.data.ndim != 1 or s.data.shape[0] != a.data.shape[0]:
        raise DimensionError(
            f"scale_rows needs (n, d) and (n,), got {a.data.shape} and {s.data.shape}"
        )
    out = a.data * s.data[:, None]
    if not _tracking(a, s):
        return _result(out)

    def backward_fn(g):
        return (g * s.data[:, None], np.sum(g * a.data, axis=1))
    return _result(out, (a, s), backward_fn)


def safe_inv(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise reciprocal with entries of magnitude < eps mapped to 0.

    The guard makes downstream normalisations well defined on degenerate
    inputs (zero vectors); guarded entries also get zero gradient.
    """
    if eps <= 0.0:
        raise ConfigError(f"safe_inv eps must be positive, got {eps}")
    mask = np.abs(a.data) > eps
    safe = np.where(mask, a.data, 1.0)
    out = np.where(mask, 1.0 / safe, 0.0)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        return (-g * out * out,)
    return _result(out, (a,), backward_fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stable under large magnitudes (per-row max shift)."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    if not _tracking(a):
        return _result(out)

    def backward_fn(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        return (out * (g - dot),)
    return _result(out, (a,), backward_fn)


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding; output shape equals input."""
    if x.data.ndim != 2:
        raise DimensionError(f"conv2d_3x3 input must be a matrix, got {x.data.shape}")
    if kernel.data.shape != (3, 3):
        raise DimensionError(f"conv2d_3x3 kernel must be (3, 3), got {kernel.data.shape}")
    if bias.data.shape != ():
        raise DimensionError(f"conv2d_3x3 bias must be a scalar, got {bias.data.shape}")
    h, w = x.data.shape
    padded = np.pad(x.data, 1)
    out = np.full((h, w), float(bias.data))
    for u in range(3):
        for v in range(3):
            out += kernel.data[u, v] * padded[u:u + h, v:v + w]
    if not _tracking(x, kernel, bias):
        return _result(out)

    def backward_fn(g):
        gp = np.pad(g, 1)
        gx = np.zeros((h, w))
        gk = np.empty((3, 3))
        for u in range(3):
            for v in range(3):
                gx += kernel.data[u, v] * gp[2 - u:2 - u + h, 2 - v:2 - v + w]
                gk[u, v] = np.sum(g * padded[u:u + h, v:v + w])
        return (gx, gk, np.asarray(np.sum(g)))
    return _result(out, (x, kernel, bias), backward_fn)


# --- parameter store ----------------------------------------------------------


class ParamStore:
    """Named parameter tensors with deterministic lexicographic iteration."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise ContractError(f"parameter {name!r} already registered")
        if not isinstance(tensor, Tensor) or not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must be a Tensor with requires_grad")
        self._entries[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._entries:
            raise ContractError(f"unknown parameter {name!r}")
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self._entries[name]) for name in self.names()]

    def total_size(self) -> int:
        return int(np.sum([t.data.size for t in self._entries.values()])) if self._entries else 0

    def copy_with(self, updates: dict[str, Tensor] | None = None) -> "ParamStore":
        updates = updates or {}
        for name in updates:
            if name not in self._entries:
                raise ContractError(f"unknown parameter {name!r} in update")
        out = ParamStore()
        for name, tensor in self._entries.items():
            replacement = updates.get(name, tensor)
            if not isinstance(replacement, Tensor) or not replacement.requires_grad:
                raise ContractError(f"replacement for {name!r} must require grad")
            if replacement.data.shape != tensor.data.shape:
                raise ContractError(
                    f"replacement for {name!r} changes shape "
                    f"{tensor.data.shape} -> {replacement.data.shape}"
                )
            out._entries[name] = replacement
        return out

    @classmethod
    def from_dict(cls, entries: dict[str, Tensor]) -> "ParamStore":
        store = cls()
        for name in sorted(entries):
            store.add(name, entries[name])
        return store


# --- reverse-mode differentiation ---------------------------------------------


def backward(loss: Tensor, params: ParamStore) -> dict[str, Tensor]:
    """Gradient of a scalar loss for every parameter in the store.

    Parameters that do not appear in the loss graph get zero gradients.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    # iterative post-order DFS; creation order alone is not available here
    topo: list[Tensor] = []
    visited: set[int] = set()
    work: list[tuple[Tensor, bool]] = [(loss, False)]
    while work:
        node, expanded = work.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        work.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                work.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones(())}
    for node in reversed(topo):
        if node._backward is None:
            continue  # leaf: its entry must survive for collection below
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    out: dict[str, Tensor] = {}
    for name, tensor in params.items():
        g = grads.get(id(tensor))
        out[name] = constant(np.zeros(tensor.data.shape) if g is None else g)
    return out


def finite_diff_grad(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    epsilon: float = 1e-5,
) -> dict[str, Tensor]:
    """Central-difference gradient of f at params, tape-free.

    Runs two evaluations of f per parameter coordinate, so keep the
    configuration tiny.  This is the oracle `backward` is verified
    against; it must stay independent of the graph machinery.
    """
    if epsilon <= 0.0:
        raise ConfigError(f"finite_diff_grad epsilon must be positive, got {epsilon}")
    out: dict[str, Tensor] = {}
    with no_grad():
        for name in params.names():
            base = params[name].data
            grad = np.zeros(base.shape)
            flat_grad = grad.ravel()
            flat_base = base.ravel()
            for i in range(base.size):
                plus = flat_base.copy()
                plus[i] += epsilon
                minus = flat_base.copy()
                minus[i] -= epsilon
                f_plus = float(f(params.copy_with({name: parameter(plus.reshape(base.shape))})))
                f_minus = float(f(params.copy_with({name: parameter(minus.reshape(base.shape))})))
                flat_grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
            out[name] = constant(grad)
    return out
