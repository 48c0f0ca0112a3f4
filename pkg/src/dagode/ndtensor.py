"""Dense array arithmetic with a small tape-based reverse-mode differentiator.

Plain ``numpy.ndarray`` values play the role of matrices throughout the
package.  A :class:`Tape` records primitive operations applied to
:class:`Node` objects; ``Tape.grad`` replays them in reverse.

Every primitive below accepts either arrays or nodes.  With array inputs
it simply evaluates, so model code can be written once and run both with
and without recording::

    tape = Tape()
    x = tape.var(3.0)
    y = x * x
    (dx,) = tape.grad(y, [x])      # 6.0
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DecompositionError, NumericError

__all__ = [
    "Tape", "Node", "grad", "is_node", "value_of",
    "add", "sub", "mul", "lincomb", "div", "neg", "power", "matmul",
    "tanh", "exp", "log", "absolute", "elu", "where",
    "sum", "mean", "reshape", "swapaxes", "concatenate", "trace_expm",
    "matrix_exp", "cholesky",
]


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "vjp")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape, index, value, parents, vjp):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        if self.ndim != 2:
            raise ContractError(".T is defined for 2-d nodes only")
        return swapaxes(self, 0, 1)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are created, so the list is topologically
    ordered by construction.  A tape is single-owner; use one per thread.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value):
        """Register an input (leaf) value."""
        value = np.array(value, dtype=float)
        return self._record(value, (), None)

    def _record(self, value, parents, vjp):
        node = Node(self, len(self.nodes), value, parents, vjp)
        self.nodes.append(node)
        return node

    def release(self):
        """Drop the recorded graph.

        Nodes point back at their tape, so a finished tape is a reference
        cycle that only the cyclic collector would reclaim, possibly long
        after its arrays matter.  Call this once gradients are taken.
        """
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes = []

    def first_nan(self):
        """Index of the first node whose value contains NaN, or None."""
        for node in self.nodes:
            if np.isnan(node.value).any():
                return node.index
        return None

    def grad(self, output, wrt):
        """Reverse-mode derivatives of scalar ``output`` w.r.t. each node in ``wrt``.

        Nodes that ``output`` does not depend on get a zero array.
        """
        if not isinstance(output, Node) or output.tape is not self:
            raise ContractError("output must be a node recorded on this tape")
        if output.value.size != 1:
            raise ContractError(f"output must be scalar, got shape {output.value.shape}")
        wanted = {}
        for node in wrt:
            if not isinstance(node, Node) or node.tape is not self:
                raise ContractError("wrt entries must be nodes recorded on this tape")
            wanted[node.index] = None

        if np.isnan(output.value).any():
            where = self.first_nan()
            raise NumericError(f"NaN produced at node {where}", where=where)
        adjoints = {output.index: np.ones_like(output.value)}
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = adjoints.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                wanted[i] = g
            node = nodes[i]
            if node.vjp is None:
                continue
            for parent, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                j = parent.index
                prev = adjoints.get(j)
                adjoints[j] = gp if prev is None else prev + gp
        out = []
        for node in wrt:
            g = wanted[node.index]
            g = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=float)
            if np.isnan(g).any():
                where = self.first_nan()
                raise NumericError(f"NaN in gradient (first NaN value at node {where})",
                                   where=node.index if where is None else where)
            out.append(g)
        return out


def grad(tape, output, wrt):
    """Module-level spelling of :meth:`Tape.grad`."""
    return tape.grad(output, wrt)


def is_node(x):
    return isinstance(x, Node)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, value, ga, gb):
    """Record a binary op; ``ga``/``gb`` map the output adjoint to parent adjoints."""
    tape = _tape_of(a, b)
    parents, fns = [], []
    if isinstance(a, Node):
        parents.append(a)
        fns.append(ga)
    if isinstance(b, Node):
        parents.append(b)
        fns.append(gb)
    return tape._record(value, tuple(parents), lambda g: [f(g) for f in fns])


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(a, b, out, lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(a, b, out, lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g * bv, sa),
                   lambda g: _unbroadcast(g * av, sb))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g / bv, sa),
                   lambda g: _unbroadcast(-g * out / bv, sb))


def lincomb(terms):
    """``sum(c * x for c, x in terms)`` with constant coefficients, as one node."""
    out = None
    for c, x in terms:
        v = c * value_of(x)
        out = v if out is None else out + v
    tape = _tape_of(*(x for _, x in terms))
    if tape is None:
        return out
    nodes = [(c, x) for c, x in terms if isinstance(x, Node)]
    shapes = [x.value.shape for _, x in nodes]
    return tape._record(np.asarray(out, dtype=float), tuple(x for _, x in nodes),
                        lambda g: [_unbroadcast(c * g, sh) for (c, _), sh in zip(nodes, shapes)])


def neg(a):
    if not isinstance(a, Node):
        return np.negative(a)
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    if isinstance(exponent, Node):
        raise ContractError("only constant exponents are supported")
    if not isinstance(a, Node):
        return np.power(a, exponent)
    av = a.value
    out = np.power(av, exponent)
    return a.tape._record(out, (a,), lambda g: (g * exponent * np.power(av, exponent - 1),))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def ga(g):
        if bv.ndim == 1:
            if av.ndim == 1:
                return g * bv
            return _unbroadcast(g[..., None] * bv, sa)
        if av.ndim == 1:
            return _unbroadcast(np.matmul(bv, g[..., None])[..., 0], sa)
        return _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), sa)

    def gb(g):
        if av.ndim == 1:
            if bv.ndim == 1:
                return g * av
            return _unbroadcast(av[:, None] * g[..., None, :], sb)
        if bv.ndim == 1:
            return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g[..., None])[..., 0], sb)
        return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), sb)

    return _binary(a, b, out, ga, gb)


def swapaxes(a, axis1=-1, axis2=-2):
    if not isinstance(a, Node):
        return np.swapaxes(a, axis1, axis2)
    return a.tape._record(np.swapaxes(a.value, axis1, axis2), (a,),
                          lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape):
    if not isinstance(a, Node):
        return np.reshape(a, shape)
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _getitem(a, idx):
    av = a.value

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return a.tape._record(np.array(av[idx], dtype=float), (a,), vjp)


def concatenate(arrays, axis=-1):
    tape = _tape_of(*arrays)
    vals = [value_of(x) for x in arrays]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = [x for x in arrays if isinstance(x, Node)]
    mask = [isinstance(x, Node) for x in arrays]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return [p for p, m in zip(parts, mask) if m]

    return tape._record(out, tuple(parents), vjp)


# -- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Node):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record(np.asarray(out, dtype=float), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    shape = np.shape(value_of(a))
    count = math.prod(shape) if axis is None else math.prod(
        shape[ax] for ax in np.atleast_1d(axis))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- elementwise nonlinearities -----------------------------------------------

def tanh(a):
    if not isinstance(a, Node):
        return np.tanh(a)
    t = np.tanh(a.value)
    return a.tape._record(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a):
    if not isinstance(a, Node):
        return np.exp(a)
    e = np.exp(a.value)
    return a.tape._record(e, (a,), lambda g: (g * e,))


def log(a):
    if not isinstance(a, Node):
        return np.log(a)
    av = a.value
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,))


def absolute(a):
    """|a|; the derivative at 0 is taken as 0."""
    if not isinstance(a, Node):
        return np.abs(a)
    s = np.sign(a.value)
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * s,))


def elu(a):
    if not isinstance(a, Node):
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
    av = a.value
    neg_part = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg_part)
    slope = np.where(av > 0, 1.0, neg_part + 1.0)
    return a.tape._record(out, (a,), lambda g: (g * slope,))


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(a, b, np.asarray(out, dtype=float),
                   lambda g: _unbroadcast(np.where(mask, g, 0.0), sa),
                   lambda g: _unbroadcast(np.where(mask, 0.0, g), sb))


def trace_expm(m):
    """Tr(e^M) for a square matrix; the gradient is (e^M)^T."""
    mv = value_of(m)
    e = matrix_exp(mv)
    out = np.array(np.trace(e))
    if not isinstance(m, Node):
        return out
    return m.tape._record(out, (m,), lambda g: (g * e.T,))


# -- numerics without recording -----------------------------------------------

_SERIES_RADIUS = 0.5
_SERIES_TERMS = 20


def matrix_exp(m):
    """Matrix exponential by scaling and squaring around a Taylor core.

    The argument is scaled by 2**-s until its 1-norm is at most 0.5, where
    the series tail after 20 terms is below 1e-30 relative to the sum.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"matrix_exp needs a square matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ContractError("matrix_exp needs finite entries")
    norm = np.abs(m).sum(axis=0).max() if m.size else 0.0
    s = 0
    if norm > _SERIES_RADIUS:
        s = int(math.ceil(math.log2(norm / _SERIES_RADIUS)))
    a = m / (2.0 ** s)
    result = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, _SERIES_TERMS + 1):
        term = term @ a / k
        result = result + term
        if not term.any():
            break
    for _ in range(s):
        result = result @ result
    if not np.isfinite(result).all():
        raise NumericError("matrix exponential overflowed")
    return result


def cholesky(k, return_jitter=False):
    """Lower Cholesky factor of ``k``, adding diagonal jitter when needed.

    Tries the bare matrix, then jitter 1e-10, 1e-9, ... 1e-4.
    """
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ContractError(f"cholesky needs a square matrix, got shape {k.shape}")
    scale = max(1.0, np.abs(k).max(initial=0.0))
    if not np.allclose(k, k.T, rtol=1e-10, atol=1e-12 * scale):
        raise ContractError("cholesky needs a symmetric matrix")
    eye = np.eye(k.shape[0])
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            low = np.linalg.cholesky(k + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return (low, jitter) if return_jitter else low
    raise DecompositionError("matrix is not positive definite even with jitter 1e-4")
