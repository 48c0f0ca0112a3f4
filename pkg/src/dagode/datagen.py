"""Synthetic data with known causal structure.

Generators return raw (unstandardized) values together with the true graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graphs
from . import ndtensor as nd
from . import odeflow
from .errors import ContractError, DecompositionError, GenerationError, NumericError
from .rng import make_rng, split

WEIGHT_RANGE = (0.5, 2.0)
NOISE_TYPES = ("gaussian", "uniform", "laplace")
GP_MAX_ROWS = 20_000


@dataclass
class Dataset:
    x: np.ndarray
    names: list
    truth: graphs.Dag | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ContractError(f"data must be a non-empty 2-d array, got {self.x.shape}")
        if np.isnan(self.x).any():
            raise ContractError("data contains NaN")
        self.names = [str(n) for n in self.names]
        if len(self.names) != self.x.shape[1]:
            raise ContractError("one column name per column required")
        if self.truth is not None and self.truth.d != self.x.shape[1]:
            raise ContractError("truth graph size does not match data width")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]


def default_names(d):
    return [f"X{i}" for i in range(d)]


def _seed_of(seed):
    return None if isinstance(seed, np.random.Generator) else seed


def _draw_weight(rng):
    lo, hi = WEIGHT_RANGE
    return rng.choice((-1.0, 1.0)) * rng.uniform(lo, hi)


def _noise(kind, n, rng):
    # every family is scaled to unit variance
    if kind == "gaussian":
        return rng.standard_normal(n)
    if kind == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), n)
    if kind == "laplace":
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), n)
    raise ContractError(f"noise must be one of {NOISE_TYPES}, got {kind!r}")


def gen_linear_sem(g, n, noise="gaussian", seed=0, names=None):
    """Linear SEM ``X_j = sum_k w_kj X_k + N_j`` on the DAG ``g``.

    Weights have magnitude in [0.5, 2.0] with a random sign; noise has
    unit variance for every node.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if noise not in NOISE_TYPES:
        raise ContractError(f"noise must be one of {NOISE_TYPES}, got {noise!r}")
    rng = make_rng(seed)
    weight_rng, *node_rngs = split(rng, g.d + 1)
    w = np.zeros((g.d, g.d))
    for a, b in sorted(g.edges):
        w[a, b] = _draw_weight(weight_rng)
    x = np.zeros((n, g.d))
    for j in g.order:
        x[:, j] = x @ w[:, j] + _noise(noise, n, node_rngs[j])
    names = list(names or g.names or default_names(g.d))
    meta = {"generator": "linear_sem", "noise": noise, "seed": _seed_of(seed),
            "n": n, "weights": w.tolist()}
    return Dataset(x, names, graphs.Dag(g.d, g.edges, names=tuple(names)), meta)


def rbf_kernel(u, v=None, bandwidth=1.0):
    """``exp(-|u - v|^2 / (2 bandwidth^2))`` between the rows of ``u`` and ``v``."""
    u = np.atleast_2d(u)
    v = u if v is None else np.atleast_2d(v)
    sq = (u * u).sum(1)[:, None] + (v * v).sum(1)[None, :] - 2.0 * u @ v.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth ** 2))


def gp_draw(inputs, rng, size=None):
    """Draw ``f ~ GP(0, rbf)`` jointly at the rows of ``inputs``."""
    k = rbf_kernel(inputs)
    try:
        low = nd.cholesky(k)
    except DecompositionError as exc:
        raise GenerationError(f"GP kernel factorization failed: {exc}") from exc
    z = rng.standard_normal(k.shape[0] if size is None else (size, k.shape[0]))
    return z @ low.T


def gen_gp_anm(g, n, seed=0, names=None):
    """Additive-noise data with GP mechanisms and unit Gaussian noise.

    Roots are standard normal.  For each other node in causal order a
    function of its parents is drawn from a unit-variance, unit-bandwidth
    RBF Gaussian process at the realized parent values.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if n > GP_MAX_ROWS:
        raise ContractError(f"gen_gp_anm supports at most {GP_MAX_ROWS} rows")
    rng = make_rng(seed)
    node_rngs = split(rng, g.d)
    x = np.zeros((n, g.d))
    for j in g.order:
        pa = g.parents(j)
        r = node_rngs[j]
        f = gp_draw(x[:, pa], r) if pa else 0.0
        x[:, j] = f + r.standard_normal(n)
    names = list(names or g.names or default_names(g.d))
    meta = {"generator": "gp_anm", "seed": _seed_of(seed), "n": n,
            "kernel": "rbf", "bandwidth": 1.0, "signal_variance": 1.0}
    return Dataset(x, names, graphs.Dag(g.d, g.edges, names=tuple(names)), meta)


# -- epidemic dynamics --------------------------------------------------------

EPIDEMIC_NAMES = ("X", "Y", "Z")


@dataclass(frozen=True)
class EpidemicParams:
    """Rates of the susceptible/infected/recovered model with immigration.

    ``A`` immigration, ``d_rate`` natural death, ``beta`` transmission,
    ``alpha`` disease death, ``gamma`` recovery, ``sigma`` immunity loss.
    """

    A: float = 0.5
    d_rate: float = 0.05
    beta: float = 0.01
    alpha: float = 0.1
    gamma: float = 0.05
    sigma: float = 0.02

    def __post_init__(self):
        for name in ("A", "d_rate", "beta", "alpha", "gamma", "sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ContractError(f"{name} must be finite and >= 0, got {v}")


DEFAULT_EPIDEMIC_X0 = (500.0, 10.0, 0.0)


def epidemic_drift(p):
    """The epidemic right-hand side as a drift (batched over rows)."""

    def rhs(t, h):
        x, y, z = h[..., 0:1], h[..., 1:2], h[..., 2:3]
        dx = p.A - p.d_rate * x - p.beta * x * y + p.sigma * z
        dy = p.beta * x * y - (p.gamma + p.alpha + p.d_rate) * y
        dz = p.gamma * y - (p.sigma + p.d_rate) * z
        return nd.concatenate([dx, dy, dz], axis=-1)

    return odeflow.FunctionDrift(rhs, 3)


def epidemic_jacobian(p, state):
    """Hand-derived Jacobian ``J[j, k] = d(rhs_j)/d(state_k)``."""
    x, y, _ = state
    return np.array([
        [-p.d_rate - p.beta * y, -p.beta * x, p.sigma],
        [p.beta * y, p.beta * x - (p.gamma + p.alpha + p.d_rate), 0.0],
        [0.0, p.gamma, -(p.sigma + p.d_rate)],
    ])


def simulate_epidemic(p, x0=DEFAULT_EPIDEMIC_X0, t_end=1.0, steps=100):
    """RK4 trajectory of shape (steps + 1, 3)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (3,) or (x0 < 0).any():
        raise ContractError("x0 must be a nonnegative 3-vector")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    try:
        return odeflow.trajectory(epidemic_drift(p), x0, 0.0, t_end, steps, "rk4")
    except NumericError as exc:
        raise NumericError(f"epidemic simulation blew up: {exc}", where=exc.where) from exc


# -- files --------------------------------------------------------------------

def save_dataset(ds, path):
    """CSV with header, plus ``.edges.tsv`` truth and ``.meta.json`` sidecars."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(ds.names) + "\n")
        for row in ds.x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    if ds.truth is not None:
        graphs.write_edge_list(ds.truth, sidecar(path, "edges"), names=ds.names)
    sidecar(path, "meta").write_text(json.dumps(ds.meta, indent=1, sort_keys=True),
                                     encoding="utf-8")


def sidecar(path, kind):
    path = Path(path)
    suffix = {"edges": ".edges.tsv", "meta": ".meta.json"}[kind]
    return path.with_name(path.stem + suffix)
