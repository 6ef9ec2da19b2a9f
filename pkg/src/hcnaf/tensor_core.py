"""Dense numeric substrate: arrays, stable log-space primitives, and a
reverse-mode tape sufficient for training MLPs with masked matrix products.

Values are plain numpy arrays. Every operation in this module accepts either
raw arrays (computed eagerly, nothing recorded) or :class:`Var` handles tied
to a :class:`Tape` (recorded for the backward pass). Model code is written
once against these functions and runs identically in both modes; training
rebuilds a fresh tape every step.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "as_matrix",
    "require_finite",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "log_tanh_deriv",
    "logsumexp",
    "log_matmul_exp",
    "log_bmm_exp",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "take",
    "concat",
    "scatter",
    "gradient",
]


def as_matrix(data, rows, cols, checked=True, dtype=np.float64):
    """Shape row-major data into a (rows, cols) array.

    In checked mode the entry count must equal rows*cols and every entry must
    be finite; violations raise ValueError.
    """
    arr = np.asarray(data, dtype=dtype)
    if checked and arr.size != rows * cols:
        raise ValueError(f"need {rows * cols} entries for a {rows}x{cols} matrix, got {arr.size}")
    out = arr.reshape(rows, cols)
    if checked:
        require_finite(out, "matrix data")
    return out


def require_finite(arr, what="array"):
    """Raise ValueError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


class Var:
    """A value recorded on a tape, carrying its adjoint after backward()."""

    __slots__ = ("value", "grad", "tape", "_vjp")

    def __init__(self, value, tape):
        self.value = value
        self.grad = None
        self.tape = tape
        self._vjp = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division between tape values is not a recorded primitive")
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Wengert list of recorded primitives.

    Nodes are appended in construction order, which is a topological order of
    the graph, so the backward pass is a single reverse sweep that visits each
    node exactly once. A tape is single-threaded; use one per worker.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._nodes = []

    def var(self, value, checked=True):
        """Record a leaf value (a trainable parameter or an input)."""
        arr = np.asarray(value, dtype=self.dtype)
        if checked:
            require_finite(arr, "leaf value")
        return self._record(arr, None)

    def _record(self, value, vjp):
        node = Var(value, self)
        node._vjp = vjp
        self._nodes.append(node)
        return node

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Propagate adjoints from a scalar loss back to every reachable leaf."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TypeError("backward() needs a scalar recorded on this tape")
        if np.size(loss.value) != 1:
            raise ValueError("backward() target must be scalar")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _accum(node, g):
    if node.grad is None:
        # adopt g when it already has the right shape; adjoints are only ever
        # replaced (never mutated), so sharing the buffer is safe
        if isinstance(g, np.ndarray) and g.shape == np.shape(node.value) and g.dtype == node.value.dtype:
            node.grad = g
        else:
            node.grad = np.array(np.broadcast_to(g, np.shape(node.value)), dtype=node.value.dtype)
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    """Sum gradient g down to a broadcast operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    tape = _tape_of(a, b)
    out = _val(a) + _val(b)
    if tape is None:
        return out

    def vjp(g, a=a, b=b):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g, b.value.shape))

    return tape._record(out, vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    out = _val(a) - _val(b)
    if tape is None:
        return out

    def vjp(g, a=a, b=b):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(-g, b.value.shape))

    return tape._record(out, vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if tape is None:
        return out

    def vjp(g, a=a, b=b, av=av, bv=bv):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g * bv, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g * av, b.value.shape))

    return tape._record(out, vjp)


def neg(a):
    tape = _tape_of(a)
    out = -_val(a)
    if tape is None:
        return out

    def vjp(g, a=a):
        _accum(a, -g)

    return tape._record(out, vjp)


def matmul(a, b):
    """2-D matrix product."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out

    def vjp(g, a=a, b=b, av=av, bv=bv):
        if isinstance(a, Var):
            _accum(a, g @ bv.T)
        if isinstance(b, Var):
            _accum(b, av.T @ g)

    return tape._record(out, vjp)


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(_val(a))
    if tape is None:
        return out

    def vjp(g, a=a, out=out):
        _accum(a, g * (1.0 - out * out))

    return tape._record(out, vjp)


def relu(a):
    tape = _tape_of(a)
    av = _val(a)
    out = np.maximum(av, 0.0)
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        _accum(a, g * (av > 0))

    return tape._record(out, vjp)


def exp(a):
    tape = _tape_of(a)
    with np.errstate(over="ignore"):
        out = np.exp(_val(a))
    if tape is None:
        return out

    def vjp(g, a=a, out=out):
        _accum(a, g * out)

    return tape._record(out, vjp)


def log(a):
    tape = _tape_of(a)
    av = _val(a)
    out = np.log(av)
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        _accum(a, g / av)

    return tape._record(out, vjp)


def _softplus_val(x):
    # log(1 + e^x) without overflow for large |x|
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a):
    tape = _tape_of(a)
    av = _val(a)
    out = _softplus_val(av)
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        _accum(a, g / (1.0 + np.exp(-av)))

    return tape._record(out, vjp)


_LN2 = float(np.log(2.0))


def log_tanh_deriv(a):
    """log(1 - tanh(a)^2) via 2*(ln 2 - a - softplus(-2a)).

    Direct evaluation underflows for |a| > 20; this identity stays finite for
    every finite input.
    """
    tape = _tape_of(a)
    av = _val(a)
    out = 2.0 * (_LN2 - av - _softplus_val(-2.0 * av))
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        # d/da log(1 - tanh(a)^2) = -2 tanh(a)
        _accum(a, g * (-2.0 * np.tanh(av)))

    return tape._record(out, vjp)


def _logsumexp_val(x, axis=None, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return s if keepdims else np.squeeze(s, axis=axis) if axis is not None else s.reshape(())


def logsumexp(a, axis=None, keepdims=False):
    """log(sum(exp(a))) along an axis, computed by max-subtraction.

    Entries may be -inf; an all-(-inf) reduction yields -inf. Empty input is
    rejected.
    """
    tape = _tape_of(a)
    av = _val(a)
    if av.size == 0:
        raise ValueError("logsumexp of an empty array")
    out = _logsumexp_val(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out

    def vjp(g, a=a, av=av, out=out):
        if axis is None:
            o = np.asarray(out).reshape((1,) * av.ndim)
            gg = np.asarray(g).reshape((1,) * av.ndim)
        elif keepdims:
            o, gg = out, g
        else:
            o, gg = np.expand_dims(out, axis), np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.where(np.isfinite(av), np.exp(av - np.where(np.isfinite(o), o, 0.0)), 0.0)
        _accum(a, gg * w)

    return tape._record(out, vjp)


def log_matmul_exp(a, b):
    """Elementwise log of exp(a) @ exp(b) for 2-D log-domain matrices.

    Each output entry is a logsumexp over the inner dimension, so the product
    never overflows for bounded inputs and -inf entries act as exact zeros.
    """
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("log_matmul_exp expects 2-D operands")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"log_matmul_exp shape mismatch: {av.shape} @ {bv.shape}")
    stack = av[:, :, None] + bv[None, :, :]
    out = _logsumexp_val(stack, axis=1)
    if tape is None:
        return out

    def vjp(g, a=a, b=b, av=av, bv=bv, out=out, stack=stack):
        with np.errstate(invalid="ignore"):
            p = np.where(np.isfinite(stack), np.exp(stack - np.where(np.isfinite(out), out, 0.0)[:, None, :]), 0.0)
        weighted = g[:, None, :] * p
        if isinstance(a, Var):
            _accum(a, weighted.sum(axis=2))
        if isinstance(b, Var):
            _accum(b, weighted.sum(axis=0))

    return tape._record(out, vjp)


def log_bmm_exp(r, w):
    """Blockwise log-domain product used by the per-dimension derivative chain.

    r has shape (n, D, k_in) and w has shape (D, k_out, k_in); the result has
    shape (n, D, k_out) with out[s,d,i] = logsumexp_j(w[d,i,j] + r[s,d,j]).
    """
    tape = _tape_of(r, w)
    rv, wv = _val(r), _val(w)
    if rv.ndim != 3 or wv.ndim != 3 or rv.shape[1] != wv.shape[0] or rv.shape[2] != wv.shape[2]:
        raise ValueError(f"log_bmm_exp shape mismatch: {rv.shape} vs {wv.shape}")
    stack = wv[None, :, :, :] + rv[:, :, None, :]
    out = _logsumexp_val(stack, axis=3)
    if tape is None:
        return out

    def vjp(g, r=r, w=w, stack=stack, out=out):
        with np.errstate(invalid="ignore"):
            p = np.where(np.isfinite(stack), np.exp(stack - np.where(np.isfinite(out), out, 0.0)[:, :, :, None]), 0.0)
        weighted = g[:, :, :, None] * p
        if isinstance(r, Var):
            _accum(r, weighted.sum(axis=2))
        if isinstance(w, Var):
            _accum(w, weighted.sum(axis=0))

    return tape._record(out, vjp)


def reduce_sum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        if axis is None:
            gg = np.asarray(g).reshape((1,) * av.ndim)
        elif keepdims:
            gg = g
        else:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, av.shape).copy())

    return tape._record(out, vjp)


def reduce_mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    tape = _tape_of(a)
    av = _val(a)
    out = av.reshape(shape)
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        _accum(a, np.asarray(g).reshape(av.shape))

    return tape._record(out, vjp)


def take(a, index):
    """Basic or integer-array indexing, recorded for the backward pass."""
    tape = _tape_of(a)
    av = _val(a)
    out = av[index]
    if tape is None:
        return out

    def vjp(g, a=a, av=av):
        grad = np.zeros_like(av)
        np.add.at(grad, index, g)
        _accum(a, grad)

    return tape._record(out, vjp)


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out

    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g, parts=parts, offsets=offsets):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(part, g[tuple(idx)])

    return tape._record(out, vjp)


def scatter(values, flat_index, shape):
    """Place a flat vector of values into a zero array at given flat positions.

    flat_index must not contain duplicates; the untouched entries stay zero.
    """
    tape = _tape_of(values)
    vv = _val(values).reshape(-1)
    out = np.zeros(shape, dtype=vv.dtype)
    out.ravel()[flat_index] = vv
    if tape is None:
        return out

    def vjp(g, values=values, flat_index=flat_index):
        _accum(values, np.asarray(g).ravel()[flat_index].reshape(values.value.shape))

    return tape._record(out, vjp)


def gradient(fn, params):
    """Gradient of a scalar computation with respect to a set of parameters.

    fn receives a dict of tape values mirroring ``params`` and must build its
    result from the recorded primitives in this module. Returns a dict of
    arrays shaped like the inputs. Raises TypeError if the computation escaped
    the tape (e.g. fn returned a raw array).
    """
    tape = Tape()
    leaves = {k: tape.var(v) for k, v in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        raise TypeError("computation was not recorded on the tape; use tensor_core primitives throughout")
    tape.backward(out)
    return {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)) for k, leaf in leaves.items()}
