"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operations that produced them; ``grad`` walks the record
backwards. Every backward rule is itself expressed through the same op set,
so gradients can be differentiated again (``create_graph=True``), which is
how second derivatives of a network with respect to its inputs are obtained
and then differentiated with respect to parameters.

Design constraints honored throughout:

* all computation in float64;
* reductions use a fixed (index) order, so repeated runs are bit-identical;
* implicit broadcasting only expands leading dimensions (a shape must be a
  suffix of the other); anything else requires an explicit ``broadcast_to``;
* non-finite values raised as errors when finite checking is enabled.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
import scipy.linalg

from . import _kernels

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _finite_enabled():
    return getattr(_state, "finite_checks", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled):
    """Toggle per-op NaN/Inf detection (on by default; hot loops turn it off
    and check their loss value instead)."""
    prev = _finite_enabled()
    _state.finite_checks = enabled
    try:
        yield
    finally:
        _state.finite_checks = prev


class ShapeError(ValueError):
    """Operand shapes incompatible with an op signature."""


class NonFiniteError(FloatingPointError):
    """A forward evaluation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the backward machinery (e.g. non-scalar output)."""


_ids = itertools.count()


class Tensor:
    """A float64 array plus the record of the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, id={self.node_id})"

    # -- operator sugar ------------------------------------------------------

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

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self, create_graph=False):
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        leaves = [t for t in _toposort(self) if t._vjp is None and t.requires_grad]
        grads = grad(self, leaves, create_graph=create_graph)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else Tensor(leaf.grad.data + g.data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    if _finite_enabled() and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values (node {out.node_id})")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


# -- broadcasting policy -----------------------------------------------------


def _check_binary(op, a, b):
    """Equal shapes, or one shape a suffix of the other (leading-dim
    expansion). Everything else must go through broadcast_to explicitly."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and (len(sb) == 0 or sa[len(sa) - len(sb):] == sb):
        return sa
    if len(sb) > len(sa) and (len(sa) == 0 or sb[len(sb) - len(sa):] == sa):
        return sb
    raise ShapeError(f"op '{op}': shapes {sa} and {sb} do not match "
                     "(only leading-dimension expansion is implicit)")


def _reduce_to(g, shape):
    """Sum a gradient over the leading dims that were implicitly expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    out = g
    for _ in range(extra):
        out = sum_(out, axis=0)
    return out


# -- elementwise and arithmetic ops -------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("subtract", a, b)
    return _make(a.data - b.data, "subtract", (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("multiply", a, b)
    return _make(a.data * b.data, "multiply", (a, b),
                 lambda g: (_reduce_to(mul(g, b), a.shape),
                            _reduce_to(mul(g, a), b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("divide", a, b)
    return _make(a.data / b.data, "divide", (a, b),
                 lambda g: (_reduce_to(div(g, b), a.shape),
                            _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "negate", (a,), lambda g: (neg(g),))


def sin(a):
    a = _as_tensor(a)
    return _make(_kernels.sin_arr(a.data), "sin", (a,),
                 lambda g: (mul(g, cos(a)),))


def cos(a):
    a = _as_tensor(a)
    return _make(_kernels.cos_arr(a.data), "cos", (a,),
                 lambda g: (neg(mul(g, sin(a))),))


def exp(a):
    a = _as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    out._vjp = (lambda g: (mul(g, out),)) if out.requires_grad else None
    return out


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, "square", (a,),
                 lambda g: (mul(mul(g, a), 2.0),))


def sqrt(a):
    a = _as_tensor(a)
    out = _make(np.sqrt(a.data), "sqrt", (a,), None)
    out._vjp = (lambda g: (div(g, mul(out, 2.0)),)) if out.requires_grad else None
    return out


def clamp_min(a, floor):
    """Elementwise max(a, floor); subgradient 1 where a == floor."""
    a = _as_tensor(a)
    mask = Tensor((a.data >= floor).astype(np.float64))
    return _make(np.maximum(a.data, floor), "clamp_min", (a,),
                 lambda g: (mul(g, mask),))


# -- structural ops -----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} are not "
                         "compatible 2-D matrices")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"op 'transpose': expected 2-D, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), "transpose", (a,),
                 lambda g: (transpose(g),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make(np.reshape(a.data, shape), "reshape", (a,),
                 lambda g: (reshape(g, old),))


def broadcast_to(a, shape):
    """Explicit broadcast; the only way to expand non-leading dimensions."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"op 'broadcast_to': cannot broadcast {a.shape} to {shape}") from exc
    old = a.shape
    # axes that were expanded: missing leading axes plus size-1 axes
    pad = len(shape) - len(old)
    axes = tuple(range(pad)) + tuple(pad + i for i, n in enumerate(old) if n == 1 and shape[pad + i] != 1)

    def vjp(g):
        red = sum_(g, axis=axes, keepdims=False) if axes else g
        return (reshape(red, old),)

    return _make(data, "broadcast_to", (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is not None:
        if not isinstance(axis, tuple):
            axis = (axis,)
        axis = tuple(ax % a.ndim for ax in axis)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    old = a.shape

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(old)), old),)
        kept = g
        if not keepdims:
            full = list(old)
            for ax in axis:
                full[ax] = 1
            kept = reshape(g, tuple(full))
        return (broadcast_to(kept, old),)

    return _make(data, "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a, key):
    a = _as_tensor(a)
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)
    old = a.shape
    return _make(data.copy(), "slice", (a,),
                 lambda g: (unslice(g, old, key),))


def unslice(g, shape, key):
    """Scatter `g` into a zero tensor of `shape` at `key` (adjoint of slice)."""
    g = _as_tensor(g)
    data = np.zeros(shape, dtype=np.float64)
    data[key] = g.data
    return _make(data, "unslice", (g,), lambda h: (getitem(h, key),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            outs.append(getitem(g, key))
        return tuple(outs)

    return _make(data, "concat", tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def correlate3x3(a, kernel):
    """Valid-mode 2D cross-correlation with a fixed (non-differentiated)
    3x3 kernel; output is (ny-2, nx-2)."""
    a = _as_tensor(a)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 3 or a.shape[1] < 3:
        raise ShapeError(f"op 'correlate3x3': field must be at least 3x3, got {a.shape}")
    if k.shape != (3, 3):
        raise ShapeError(f"op 'correlate3x3': kernel must be 3x3, got {k.shape}")
    data = _kernels.correlate3x3_valid(a.data, k)
    flipped = k[::-1, ::-1].copy()
    ny, nx = a.shape

    def vjp(g):
        padded = unslice(g, (ny + 2, nx + 2), (slice(2, -2), slice(2, -2)))
        return (correlate3x3(padded, flipped),)

    return _make(data, "correlate3x3", (a,), vjp)


# -- dense linear algebra ------------------------------------------------------


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"op 'cholesky': expected square matrix, got {a.shape}")
    data = np.linalg.cholesky(a.data)
    out = _make(data, "cholesky", (a,), None)
    if not out.requires_grad:
        return out
    m = a.shape[0]
    # lower-triangular mask with halved diagonal, used by the standard
    # Cholesky reverse rule
    phi_mask = Tensor(np.tril(np.ones((m, m))) - 0.5 * np.eye(m))

    def vjp(g):
        w = matmul(transpose(out), g)
        phi = mul(w, phi_mask)
        tmp = solve_triangular(out, phi, trans=True)           # L^-T phi
        kbar = transpose(solve_triangular(out, transpose(tmp), trans=True))
        return (mul(add(kbar, transpose(kbar)), 0.5),)

    out._vjp = vjp
    return out


def solve_triangular(l, b, trans=False):
    """Solve L x = b (or L^T x = b when trans) for lower-triangular L."""
    l, b = _as_tensor(l), _as_tensor(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1] or b.ndim != 2 or b.shape[0] != l.shape[0]:
        raise ShapeError(f"op 'solve_triangular': shapes {l.shape} and {b.shape} invalid")
    data = scipy.linalg.solve_triangular(l.data, b.data, lower=True,
                                         trans=1 if trans else 0, check_finite=False)
    out = _make(data, "solve_triangular", (l, b), None)
    if not out.requires_grad:
        return out
    tril_mask = Tensor(np.tril(np.ones(l.shape)))

    def vjp(g):
        bbar = solve_triangular(l, g, trans=not trans)
        if trans:
            lbar = neg(matmul(out, transpose(bbar)))
        else:
            lbar = neg(matmul(bbar, transpose(out)))
        return (mul(lbar, tril_mask), bbar)

    out._vjp = vjp
    return out


# -- backward engine -----------------------------------------------------------


def _toposort(root):
    """Reverse topological order over nodes contributing gradient to root."""
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
    order.reverse()
    return order


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar `output` with respect to each tensor in `wrt`.

    With ``create_graph=True`` the returned gradients carry their own op
    records and can be differentiated again.
    """
    if not isinstance(output, Tensor):
        raise GraphError("grad: output must be a Tensor")
    if output.size != 1:
        raise GraphError(f"grad: output must be scalar, got shape {output.shape}")
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    keep = {id(t) for t in targets}

    grads = {id(output): Tensor(np.ones_like(output.data))}
    results = {}
    if output.requires_grad:
        prev = _grad_enabled()
        _state.grad_enabled = bool(create_graph)
        try:
            for node in _toposort(output):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in keep:
                    results[id(node)] = g
                if node._vjp is None:
                    continue
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else add(acc, pg)
        finally:
            _state.grad_enabled = prev
    elif id(output) in keep:
        results[id(output)] = grads[id(output)]

    out = []
    for t in targets:
        g = results.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out[0] if single else out


def check_gradient(fn, inputs, step=1e-5):
    """Worst relative error between reverse-mode and central finite
    differences of ``fn(*tensors) -> scalar`` over every input component.

    The denominator is max(|analytic|, |numeric|, 1e-8) per component.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    analytic = [g.data for g in grad(out, tensors)]

    worst = 0.0
    for i, x in enumerate(inputs):
        base = np.asarray(x, dtype=np.float64)
        flat = base.reshape(-1)
        for j in range(flat.size):
            for sign, store in ((1.0, "hi"), (-1.0, "lo")):
                pert = flat.copy()
                pert[j] += sign * step
                args = [Tensor(pert.reshape(base.shape)) if k == i else Tensor(np.asarray(v, dtype=np.float64))
                        for k, v in enumerate(inputs)]
                val = float(fn(*args).data)
                if store == "hi":
                    hi = val
                else:
                    lo = val
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
