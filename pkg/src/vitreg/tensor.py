"""Dense tensors recorded on a reverse-mode differentiation tape.

A :class:`Tensor` wraps a contiguous row-major NumPy buffer (up to five
axes: batch, channel, and three spatial). Operations are pure functions
that return new tensors; while a :class:`Tape` is active, every
operation touching a ``requires_grad`` tensor appends a node, and
:func:`backward` replays the nodes in reverse creation order (which is
already a topological order).

Tapes are per-forward-pass: open one, run the model, call ``backward``,
then drop it. Parameters live outside any tape and accumulate into
their ``.grad`` slot.

Binary operations require exactly matching shapes; the only implicit
broadcast anywhere is multiplying a tensor by a Python scalar
(:func:`scale`). Anything fancier must go through explicit reshapes.
"""

import numpy as np
from scipy.special import erf

MAX_AXES = 5

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """N-d floating-point value, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if arr.ndim > MAX_AXES:
            raise ValueError(f"tensors support at most {MAX_AXES} axes, got {arr.ndim}")
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")

    def detach(self):
        """Copy of the value with no tape history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


class Node:
    """One tape record: the op, its inputs, its output, and the VJP."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_TAPES = []


class Tape:
    """Ordered op records for one forward pass; creation order is topological."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def record(op, out, inputs, vjp):
    """Attach a tape node to ``out`` if recording applies; returns ``out``."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = Node(op, tuple(inputs), out, vjp)
    out.node = node
    tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _check_binary(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def add(a, b):
    _check_binary("add", a, b)
    out = Tensor(a.data + b.data)
    return record("add", out, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_binary("sub", a, b)
    out = Tensor(a.data - b.data)
    return record("sub", out, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return record("mul", out, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    """Multiply by a Python scalar (the only implicit broadcast allowed)."""
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))
    return record("scale", out, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0))
    return record("relu", out, (a,), lambda g: (g * mask,))


def gelu(a):
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return record("gelu", out, (a,), vjp)


def square(a):
    x = a.data
    out = Tensor(x * x)
    return record("square", out, (a,), lambda g: (g * (2.0 * x),))


_UNARY = {"relu": relu, "gelu": gelu, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, a, b=None, scalar=None):
    """Dispatch by name: add/sub/mul (binary), scale (scalar), relu/gelu/square."""
    if op == "scale":
        if scalar is None:
            raise ValueError("scale needs a scalar factor")
        return scale(a, scalar)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two tensors")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes a single tensor")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ValueError(f"matmul: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner extents differ {a.shape[-1]} vs {b.shape[-2]}"
        )
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def vjp(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(x, axes):
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ValueError(f"axis {ax} invalid for shape {x.shape}")
        norm.append(ax % x.ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _spread(x, g, axes, keepdims, factor=1.0):
    """Broadcast a reduced gradient back to the input shape."""
    if not keepdims:
        kshape = tuple(1 if ax in axes else e for ax, e in enumerate(x.shape))
        g = g.reshape(kshape)
    out = np.broadcast_to(g, x.shape)
    if factor != 1.0:
        return out * np.asarray(factor, dtype=x.dtype)
    return np.ascontiguousarray(out)


def reduce(op, x, axes=None, keepdims=False):
    """sum/mean/max over ``axes`` (all axes when None).

    Max routes the gradient to the arg-max element only; ties go to the
    lowest linear index of the reduced block.
    """
    axes = _normalize_axes(x, axes)
    xd = x.data
    if op == "sum":
        out = Tensor(xd.sum(axis=axes, keepdims=keepdims))
        return record(
            "sum", out, (x,), lambda g: (_spread(x, g, axes, keepdims),)
        )
    if op == "mean":
        count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
        out = Tensor(xd.mean(axis=axes, keepdims=keepdims))
        return record(
            "mean",
            out,
            (x,),
            lambda g: (_spread(x, g, axes, keepdims, factor=1.0 / count),),
        )
    if op == "max":
        kept = tuple(ax for ax in range(x.ndim) if ax not in axes)
        perm = kept + axes
        kept_shape = tuple(x.shape[ax] for ax in kept)
        block = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
        x2 = np.ascontiguousarray(xd.transpose(perm)).reshape(kept_shape + (block,))
        amax = np.argmax(x2, axis=-1)
        out = Tensor(xd.max(axis=axes, keepdims=keepdims))

        def vjp(g):
            gk = g.reshape(kept_shape)
            buf = np.zeros_like(x2)
            np.put_along_axis(buf, amax[..., None], gk[..., None], axis=-1)
            t_shape = tuple(x.shape[ax] for ax in perm)
            dx = buf.reshape(t_shape).transpose(np.argsort(perm))
            return (np.ascontiguousarray(dx),)

        return record("max", out, (x,), vjp)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return record(
        "transpose",
        out,
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(tensors, axis):
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim or t.dtype != base.dtype:
            raise ValueError("concat: rank/dtype mismatch")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(np.ascontiguousarray(p) for p in parts)

    return record("concat", out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# backward & verification


def backward(loss, tape=None):
    """Propagate d(loss)/d(tensor) into ``.grad`` of every reachable
    requires_grad tensor. ``loss`` must be scalar (all extents 1)."""
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise RuntimeError("backward needs an active or explicitly passed tape")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    pending = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        out, g = entry
        out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = (t, pending[key][1] + gi)
            else:
                pending[key] = (t, gi)
    for t, g in pending.values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def grad_check(f, x, eps=1e-5, n_samples=200, seed=0):
    """Max relative error between the taped gradient of ``f`` at ``x`` and
    central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    ``x.data`` is perturbed in place, so closures over ``x`` work. For
    large tensors only ``n_samples`` coordinates are checked (fixed
    ``seed``); pass ``n_samples=None`` to check all.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"grad_check target must be scalar, got {out.shape}")
        backward(out, tape)
    analytic = (
        np.zeros(x.size, dtype=np.float64)
        if x.grad is None
        else x.grad.astype(np.float64).reshape(-1)
    )

    flat = x.data.reshape(-1)
    if n_samples is not None and flat.size > n_samples:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
    else:
        coords = np.arange(flat.size)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst
