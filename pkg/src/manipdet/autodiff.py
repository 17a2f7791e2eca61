"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Everything the detector trains with runs through this module: tensors wrap
float64 numpy arrays, operations record themselves on the active tape, and
``backward`` replays the tape in reverse to fill leaf gradients. The tape is
rebuilt on every forward pass (define-by-run). Single precision can be opted
into with ``set_default_dtype`` but gradient checking expects float64.
"""

from __future__ import annotations

import math

import numpy as np

_DEFAULT_DTYPE = np.float64

# Large negative additive-mask value. exp() underflows to exactly 0.0 for
# anything this far below the row max, so masked attention weights are exact
# zeros while every stored value stays finite.
MASK_NEG = -1e9


def set_default_dtype(dtype) -> None:
    """Switch the numeric type for newly created tensors (float64 default)."""
    global _DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense array with an optional gradient slot and tape provenance.

    ``node_id`` is the index of the tape entry that produced this tensor, or
    None for leaves (parameters, constants, inputs). Gradients accumulate in
    ``grad`` for leaves with ``requires_grad`` set; call ``zero_grad`` between
    optimization steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node_id is None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the recorded primitives below
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Entries are appended in execution order, so every operand of entry i was
    produced by an earlier entry or is a leaf; ``backward`` walks the list
    once, in reverse.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs, out_data, backward_fn) -> Tensor:
    """Wrap a primitive's result, recording it when gradients are needed."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(inputs, out, backward_fn))
        out.node_id = len(tape.entries) - 1
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record((a, b), a.data * b.data, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record((a, b), a.data / b.data, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), -a.data, lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route their subgradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    mask = a.data >= b.data

    def bwd(g):
        return (
            _unbroadcast(g * mask, a.shape),
            _unbroadcast(g * ~mask, b.shape),
        )

    return _record((a, b), np.maximum(a.data, b.data), bwd)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    mask = a.data <= b.data

    def bwd(g):
        return (
            _unbroadcast(g * mask, a.shape),
            _unbroadcast(g * ~mask, b.shape),
        )

    return _record((a, b), np.minimum(a.data, b.data), bwd)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching; both operands must be >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # collapse the batch into one big GEMM; much faster than looped matmul
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(lead + (b.shape[-1],))

        def bwd(g):
            g2 = g.reshape(-1, b.shape[-1])
            da = (g2 @ b.data.T).reshape(a.shape)
            db = a.data.reshape(-1, a.shape[-1]).T @ g2
            return da, db

        return _record((a, b), out, bwd)

    def bwd(g):
        da = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        db = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return da, db

    return _record((a, b), np.matmul(a.data, b.data), bwd)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _record((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bwd)


def slice_(a, key) -> Tensor:
    """Basic slicing (tuples of slice objects / ints); gradient scatters back."""
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record((a,), a.data[key], bwd)


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _record((a,), a.data[idx], bwd)


def embedding(table, ids) -> Tensor:
    """Look up rows of ``table`` by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    shape = table.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _record((table,), table.data[ids], bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record((a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record((a,), out, lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record((a,), out, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record((a,), out, bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record((a,), out, bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record((a,), out, bwd)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ValueError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last axis of {a.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record((a, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).copy(),)

    return _record((a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / n, shape).copy(),)

    return _record((a,), a.data.mean(axis=axis, keepdims=keepdims), bwd)


# ---------------------------------------------------------------------------
# backward pass and the gradient oracle


def backward(tape: Tape, root: Tensor) -> None:
    """Fill ``grad`` on every leaf that requires it with d(root)/d(leaf).

    The root must be scalar-shaped. Entries are visited exactly once in
    reverse recording order; repeated calls accumulate into leaf gradients.
    """
    if root.shape != ():
        raise ValueError(f"backward root must be scalar-shaped, got {root.shape}")

    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    if root.is_leaf:
        if root.requires_grad:
            root.grad = (0.0 if root.grad is None else root.grad) + grads[id(root)]
        return

    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        input_grads = entry.backward_fn(g)
        for inp, gi in zip(entry.inputs, input_grads):
            if not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi


def finite_diff_check(f, x: Tensor, h: float = 1e-5, coords=None, rng=None) -> float:
    """Central-difference gradient oracle.

    Evaluates ``f`` (a scalar-valued function of one tensor) analytically via
    the tape and numerically via central differences, and returns
    ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)``. ``coords`` limits the
    check to a sample of coordinates (int for a seeded random sample, or an
    explicit list of flat indices); by default every coordinate is checked.
    Non-finite values anywhere are reported as ``inf``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.shape != ():
            raise ValueError("finite_diff_check needs a scalar-valued function")
        backward(tape, y)
    if probe.grad is None:
        analytic = np.zeros_like(probe.data)
    else:
        analytic = probe.grad
    if not np.all(np.isfinite(analytic)) or not np.isfinite(y.data):
        return float("inf")

    flat_idx = np.arange(probe.size)
    if isinstance(coords, int) and coords < probe.size:
        rng = np.random.default_rng(0) if rng is None else rng
        flat_idx = rng.choice(probe.size, size=coords, replace=False)
    elif coords is not None and not isinstance(coords, int):
        flat_idx = np.asarray(coords)

    base = probe.data.reshape(-1)
    worst = 0.0
    for i in flat_idx:
        pert = base.copy()
        pert[i] = base[i] + h
        hi = f(Tensor(pert.reshape(x.shape))).data
        pert[i] = base[i] - h
        lo = f(Tensor(pert.reshape(x.shape))).data
        if not (np.isfinite(hi) and np.isfinite(lo)):
            return float("inf")
        fd = (hi - lo) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return float(worst)


def finite_diff_params(loss_fn, named_params: dict[str, Tensor], h: float = 1e-5,
                       coords_per_tensor=None, seed: int = 0) -> dict[str, float]:
    """Run the central-difference oracle against a whole parameter dict.

    ``loss_fn`` takes no arguments and recomputes a scalar loss from the live
    parameter tensors, so one analytic backward pass covers every tensor; the
    numeric side perturbs each coordinate in place (all of them, or a seeded
    sample of ``coords_per_tensor`` per tensor). Returns per-tensor max
    relative errors; existing gradients are cleared first.
    """
    rng = np.random.default_rng(seed)
    for p in named_params.values():
        p.zero_grad()
    with Tape() as tape:
        y = loss_fn()
        backward(tape, y)
    if not np.isfinite(y.data):
        return {name: float("inf") for name in named_params}

    errors: dict[str, float] = {}
    for name, p in named_params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_grad = analytic.reshape(-1)
        idx = np.arange(p.size)
        if coords_per_tensor is not None and coords_per_tensor < p.size:
            idx = rng.choice(p.size, size=coords_per_tensor, replace=False)
        flat = p.data.flat
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn().data
            flat[i] = orig - h
            lo = loss_fn().data
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                worst = float("inf")
                break
            fd = (hi - lo) / (2.0 * h)
            worst = max(worst, abs(flat_grad[i] - fd) / max(1.0, abs(flat_grad[i])))
        errors[name] = float(worst)
        p.zero_grad()
    return errors
