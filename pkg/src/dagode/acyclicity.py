"""Smooth acyclicity measures for weighted adjacency and Jacobian matrices.

``h(W) = Tr(exp(W*W)) - d`` is zero exactly when the support of ``W`` is
acyclic and positive otherwise.  The polynomial variant
``Tr[(I + a W*W)^d] - d`` has the same zero set for any ``a > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ContractError


@dataclass(frozen=True)
class ConstraintValue:
    h: float
    grad: np.ndarray


def _square(w, name):
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ContractError(f"{name} needs a square matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ContractError(f"{name} needs finite entries")
    return w


def h_exp(w):
    w = _square(w, "h_exp")
    e = nd.matrix_exp(w * w)
    h = max(float(np.trace(e)) - w.shape[0], 0.0)
    return ConstraintValue(h, e.T * 2.0 * w)


def h_exp_graph(w):
    """Tape-recordable ``h_exp`` for a node (or array) ``w``."""
    d = nd.value_of(w).shape[0]
    return nd.trace_expm(w * w) - float(d)


def h_poly_graph(w, alpha):
    d = nd.value_of(w).shape[0]
    b = np.eye(d) + alpha * (w * w)
    p = b
    for _ in range(d - 1):
        p = p @ b
    return nd.sum(p * np.eye(d)) - float(d)


def h_poly(w, alpha=None):
    """Polynomial acyclicity measure; ``alpha`` defaults to ``1/d``."""
    w = _square(w, "h_poly")
    if alpha is None:
        alpha = 1.0 / w.shape[0]
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    tape = nd.Tape()
    wn = tape.var(w)
    out = h_poly_graph(wn, alpha)
    (g,) = tape.grad(out, [wn])
    tape.release()
    return ConstraintValue(max(float(out.value), 0.0), g)


def mask_diagonal(j):
    j = np.array(j, dtype=float)
    np.fill_diagonal(j, 0.0)
    return j


def h_jacobian(jbar):
    """``h_exp`` of an averaged Jacobian with self-dependence removed."""
    jbar = _square(jbar, "h_jacobian")
    return h_exp(mask_diagonal(jbar))
