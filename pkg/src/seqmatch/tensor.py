"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  The graph is built
per forward pass (define-by-run) and walked in reverse topological order by
:func:`backward`.  Only leaves created with ``requires_grad=True`` accumulate
``.grad``; intermediate gradients live in a dict local to the backward call, so
independent graphs over shared read-only parameters never interfere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_SENTINEL = -1e30


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class PreconditionError(ValueError):
    """An operation was called with inputs violating its contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, as_tensor(-1.0, self.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data, parents: tuple, backward_fn) -> Tensor:
    if not _needs_grad(*parents):
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Raises :class:`PreconditionError` when ``loss`` is not a scalar.
    """
    if loss.data.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _needs_grad(parent):
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix or has
    the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), _bw)


def _check_elementwise(a: Tensor, b: Tensor, kind: str):
    if a.shape == b.shape:
        return
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None
    if shape != a.shape:
        raise ShapeError(f"{kind}: right operand {b.shape} must broadcast into {a.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, getattr(a, "dtype", None))
    _check_elementwise(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, getattr(a, "dtype", None))
    _check_elementwise(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, getattr(a, "dtype", None))
    _check_elementwise(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape)))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b) -> Tensor:
    try:
        return _ELEMENTWISE[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; clamped entries get zero gradient."""
    x = as_tensor(x)
    safe = np.maximum(x.data, floor) if floor > 0 else x.data
    out = np.log(safe)
    return _make(out, (x,), lambda g: (g * (x.data >= floor) / safe,))


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(kind: str, x) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# masked normalisation and pooling
# ---------------------------------------------------------------------------

def _broadcast_mask(mask, shape: tuple, op: str) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    try:
        return np.broadcast_to(m, shape) > 0
    except ValueError:
        raise ShapeError(f"{op}: mask {m.shape} does not broadcast to {shape}") from None


def _require_real(keep: np.ndarray, axis: int, op: str):
    if not keep.any(axis=axis).all():
        raise PreconditionError(f"{op}: a slice along axis {axis} has no real positions")


def masked_softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to positions where ``mask`` is 1.

    Masked positions get exactly zero weight.  ``mask`` must broadcast to the
    logits' shape.
    """
    x = as_tensor(logits)
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = _broadcast_mask(mask, x.shape, "masked_softmax")
        _require_real(keep, axis, "masked_softmax")
    z = np.where(keep, x.data, MASK_SENTINEL)
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.where(keep, np.exp(z), 0.0)
    out = ez / ez.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw)


def masked_max(x: Tensor, mask, axis: int) -> Tensor:
    """Max over real positions; the gradient goes to the first argmax."""
    x = as_tensor(x)
    keep = _broadcast_mask(mask, x.shape, "masked_max")
    _require_real(keep, axis, "masked_max")
    filled = np.where(keep, x.data, -np.inf)
    idx = np.expand_dims(np.argmax(filled, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), _bw)


def masked_mean(x: Tensor, mask, axis: int) -> Tensor:
    x = as_tensor(x)
    keep = _broadcast_mask(mask, x.shape, "masked_mean")
    _require_real(keep, axis, "masked_mean")
    count = keep.sum(axis=axis, keepdims=True).astype(x.dtype)
    out = np.where(keep, x.data, 0.0).sum(axis=axis) / count.squeeze(axis)

    def _bw(g):
        return (np.where(keep, np.expand_dims(g, axis) / count, 0.0),)

    return _make(out, (x,), _bw)


def masked_reduce(kind: str, x, mask, axis: int = 0) -> Tensor:
    if kind == "max":
        return masked_max(x, mask, axis)
    if kind == "mean":
        return masked_mean(x, mask, axis)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(parts), _bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(x.data[index], (x,), _bw)


def gather_rows(table: Tensor, ids, skip_id: int | None = None) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape.

    Rows addressed by ``skip_id`` receive no gradient.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def _bw(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.shape[1])
        if skip_id is not None:
            keep = flat_ids != skip_id
            flat_ids, flat_g = flat_ids[keep], flat_g[keep]
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat_ids, flat_g)
        return (gt,)

    return _make(out, (table,), _bw)


def pick(x: Tensor, index) -> Tensor:
    """``out[b] = x[b, index[b]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _make(out, (x,), _bw)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# recurrent scan
# ---------------------------------------------------------------------------

def lstm(x: Tensor, mask, w_in: Tensor, w_rec: Tensor, bias: Tensor,
         reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over a padded batch ``x`` of shape (B, T, d).

    Gates are packed as [input, forget, candidate, output] along the last axis
    of ``w_in`` (d, 4h), ``w_rec`` (h, 4h) and ``bias`` (4h).  At a padded step
    the state is carried through unchanged and the emitted hidden state is
    zero, so trailing padding never reaches real positions in either
    direction.  Forward and backward passes are written out by hand; the
    recurrence would otherwise create several graph nodes per time step.
    """
    x, w_in, w_rec, bias = (as_tensor(t) for t in (x, w_in, w_rec, bias))
    if x.ndim != 3:
        raise ShapeError(f"lstm expects (B, T, d) input, got {x.shape}")
    B, T, d = x.shape
    h_dim = w_rec.shape[0]
    if w_in.shape != (d, 4 * h_dim) or w_rec.shape != (h_dim, 4 * h_dim) or bias.shape != (4 * h_dim,):
        raise ShapeError(f"lstm: weights {w_in.shape}, {w_rec.shape}, {bias.shape} "
                         f"do not fit input width {d}")
    m = np.broadcast_to(np.asarray(mask, dtype=x.dtype), (B, T))
    dt = x.dtype
    pre = x.data @ w_in.data + bias.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, h_dim), dtype=dt)
    c = np.zeros((B, h_dim), dtype=dt)
    out = np.zeros((B, T, h_dim), dtype=dt)
    cache = {}
    for t in steps:
        z = pre[:, t] + h @ w_rec.data
        i = _sigmoid(z[:, :h_dim])
        f = _sigmoid(z[:, h_dim:2 * h_dim])
        g = np.tanh(z[:, 2 * h_dim:3 * h_dim])
        o = _sigmoid(z[:, 3 * h_dim:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t, None]
        cache[t] = (h, c, i, f, g, o, tc)
        out[:, t] = mt * h_new
        h = mt * h_new + (1.0 - mt) * h
        c = mt * c_new + (1.0 - mt) * c

    def _bw(gout):
        d_pre = np.zeros_like(pre)
        d_rec = np.zeros_like(w_rec.data)
        dh = np.zeros((B, h_dim), dtype=dt)
        dc = np.zeros((B, h_dim), dtype=dt)
        for t in reversed(list(steps)):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            mt = m[:, t, None]
            dh_new = mt * (gout[:, t] + dh)
            dc_new = mt * dc + dh_new * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dc_new * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ], axis=1)
            d_pre[:, t] = dz
            d_rec += h_prev.T @ dz
            dh = (1.0 - mt) * dh + dz @ w_rec.data.T
            dc = (1.0 - mt) * dc + dc_new * f
        flat = d_pre.reshape(-1, 4 * h_dim)
        return (d_pre @ w_in.data.T, x.data.reshape(-1, d).T @ flat, d_rec, flat.sum(axis=0))

    return _make(out, (x, w_in, w_rec, bias), _bw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named registry of leaf tensors, the trainable state of a model."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            p = self._params[k]
            if p.shape != tuple(v.shape):
                raise ShapeError(f"{k}: stored shape {tuple(v.shape)} != {p.shape}")
            p.data = np.array(v, dtype=self.dtype)

    def checksum(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in sorted(self._params if names is None else names):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    h: float
    tol: float
    errors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.errors.values() if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=lambda k: float(self.errors[k].max()) if self.errors[k].size else 0.0)
        return name, float(self.errors[name].max())


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients with central finite differences.

    ``f`` rebuilds the graph and returns a scalar loss each time it is called.
    The error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if isinstance(params, ParamStore):
        params = params.trainable()
    elif not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    backward(f())
    report = GradCheckReport(h=h, tol=tol)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            down = float(f().data)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2.0 * h)
        report.errors[name] = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return report
