"""Structure learners: linear NOTEARS and the ODE-flow learner.

Both fit a model under the smooth acyclicity constraint with an
augmented-Lagrangian outer loop and read the graph off an effective
adjacency matrix (``|W|`` or the averaged absolute drift Jacobian).
Adjacency matrices are indexed ``[parent, child]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import acyclicity, graphs
from . import ndtensor as nd
from . import odeflow
from .datagen import Dataset
from .errors import ContractError, NumericError, OptimizationError
from .rng import make_rng


@dataclass
class LearnerConfig:
    lambda1: float = 0.1
    rho0: float = 1.0
    rho_mult: float = 10.0
    rho_max: float = 1e16
    h_tol: float = 1e-8
    max_outer: int = 20
    inner_steps: int = 300
    lr: float = 1e-2
    threshold: float | None = 0.3
    seed: int = 0
    standardize: bool = True
    # inner solver: "adam" (projected, cosine-decayed) or "lbfgs"
    optimizer: str = "adam"
    lr_floor: float = 1e-3
    constraint: str = "exp"
    # ODE-flow learner
    hidden: tuple = (32,)
    activation: str = "tanh"
    init_scale: float = 0.1
    ode_steps: int = 40
    method: str = "rk4"
    batch_size: int = 256
    gradient: str = "direct"
    time_conditioned: bool = False

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ContractError("rho0 must be positive")
        if not self.rho_mult > 1:
            raise ContractError("rho_mult must exceed 1")
        if not self.h_tol > 0:
            raise ContractError("h_tol must be positive")
        if self.threshold is not None and self.threshold < 0:
            raise ContractError("threshold must be >= 0")
        if self.optimizer not in ("adam", "lbfgs"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.constraint not in ("exp", "poly"):
            raise ContractError(f"unknown constraint form {self.constraint!r}")
        if self.gradient not in ("direct", "adjoint"):
            raise ContractError(f"unknown gradient mode {self.gradient!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def notears(cls, **overrides):
        base = dict(lambda1=0.1, threshold=0.3, standardize=False, optimizer="lbfgs")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def dag_ode(cls, **overrides):
        # full-batch L-BFGS up to 1000 rows; larger data gets one fixed random
        # batch of 1000 per inner solve
        base = dict(lambda1=0.01, threshold=None, standardize=True, optimizer="lbfgs",
                    inner_steps=200, ode_steps=10, batch_size=1000)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class TraceEntry:
    outer: int
    loss: float
    h: float
    rho: float
    lam: float
    accepted: bool


@dataclass
class FitResult:
    """``adjacency`` is the nonnegative effective adjacency ``[parent, child]``
    with a zero diagonal; ``raw`` is the signed ``W`` (linear) or the
    unmasked averaged Jacobian ``J[child, parent]`` (ODE flow)."""

    adjacency: np.ndarray
    dag: graphs.Dag
    h_final: float
    converged: bool
    threshold: float
    trace: list = field(default_factory=list)
    raw: np.ndarray | None = None
    model: odeflow.OdeModel | None = None
    names: list = field(default_factory=list)

    @property
    def w_or_jbar(self):
        return self.adjacency


# -- optimizers ---------------------------------------------------------------

class Adam:
    """Adam with optional box projection after each step."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, lower=None, upper=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lower, self.upper = lower, upper
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr=None):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta = theta - (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)
        if self.lower is not None or self.upper is not None:
            theta = np.clip(theta, self.lower, self.upper)
        return theta


class Problem:
    """Objective and constraint sharing one parameter vector.

    ``evaluate(theta)`` returns ``(loss, dloss, h, dh)`` for inner steps
    (it may be stochastic); ``h_exact(theta)`` is the constraint value used
    by the outer loop.
    """

    def __init__(self, objective, constraint, h_exact=None):
        self.objective = objective
        self.constraint = constraint
        self._h_exact = h_exact

    def evaluate(self, theta):
        f, gf = self.objective(theta)
        h, gh = self.constraint(theta)
        return f, gf, h, gh

    def h_exact(self, theta):
        if self._h_exact is not None:
            return self._h_exact(theta)
        return self.constraint(theta)[0]

    def begin_inner(self):
        """Called before every inner solve; stochastic problems may resample here."""


@dataclass
class ALResult:
    theta: np.ndarray
    h: float
    loss: float
    rho: float
    lam: float
    converged: bool
    trace: list


def _inner_adam(problem, theta, rho, lam, cfg, lower, upper):
    opt = Adam(cfg.lr, lower=lower, upper=upper)
    n = max(cfg.inner_steps, 1)
    loss = math.nan
    for k in range(cfg.inner_steps):
        loss, gf, h, gh = problem.evaluate(theta)
        if not (np.isfinite(loss) and np.isfinite(h)):
            return theta, math.nan
        g = gf + (rho * h + lam) * gh
        frac = k / n
        lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
        theta = opt.step(theta, g, lr)
    return theta, loss


def _inner_lbfgs(problem, theta, rho, lam, cfg, lower, upper):
    def fun(th):
        f, gf, h, gh = problem.evaluate(th)
        return f + 0.5 * rho * h * h + lam * h, gf + (rho * h + lam) * gh

    bounds = None
    if lower is not None or upper is not None:
        lo = np.broadcast_to(-np.inf if lower is None else lower, theta.shape)
        hi = np.broadcast_to(np.inf if upper is None else upper, theta.shape)
        bounds = list(zip(lo, hi))
    res = optimize.minimize(fun, theta, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": cfg.inner_steps})
    return res.x, float(problem.evaluate(res.x)[0])


def augmented_lagrangian(problem, theta0, cfg, lower=None, upper=None):
    """Minimize ``loss`` subject to ``h = 0`` by the method of multipliers.

    Each outer iteration minimizes ``loss + rho/2 h^2 + lam h`` from the
    last accepted point.  If ``h`` did not shrink by a factor of 4, ``rho``
    is multiplied by ``rho_mult`` and the subproblem is re-solved; then
    ``lam += rho h``.  Stops once ``h <= h_tol``, ``rho`` exceeds
    ``rho_max`` or ``max_outer`` iterations have run.
    """
    inner = _inner_adam if cfg.optimizer == "adam" else _inner_lbfgs
    theta = np.array(theta0, dtype=float)
    rho, lam = cfg.rho0, 0.0
    h_prev = math.inf
    loss = math.nan
    trace = []
    for outer in range(cfg.max_outer):
        while True:
            problem.begin_inner()
            cand, cand_loss = inner(problem, theta, rho, lam, cfg, lower, upper)
            h_new = problem.h_exact(cand) if np.isfinite(cand_loss) else math.nan
            if not (np.isfinite(cand_loss) and np.isfinite(h_new)):
                trace.append(TraceEntry(outer, cand_loss, h_new, rho, lam, False))
                raise OptimizationError(f"objective diverged at outer iteration {outer}", trace)
            shrunk = h_new <= 0.25 * h_prev
            if not shrunk and rho * cfg.rho_mult <= cfg.rho_max:
                trace.append(TraceEntry(outer, cand_loss, h_new, rho, lam, False))
                rho *= cfg.rho_mult
                continue
            break
        theta, h_prev, loss = cand, h_new, cand_loss
        trace.append(TraceEntry(outer, loss, h_prev, rho, lam, True))
        lam += rho * h_prev
        if h_prev <= cfg.h_tol or rho * cfg.rho_mult > cfg.rho_max:
            break
    return ALResult(theta, h_prev, loss, rho, lam, h_prev <= cfg.h_tol, trace)


# -- thresholding -------------------------------------------------------------

def threshold(w, omega, names=()):
    """Keep off-diagonal ``|w| > omega``; break any cycles by dropping the weakest edges."""
    if omega < 0:
        raise ContractError("threshold must be >= 0")
    a = np.abs(np.asarray(w, dtype=float))
    np.fill_diagonal(a, 0.0)
    keep = a > omega
    if not graphs.is_dag(keep):
        rows, cols = np.nonzero(keep)
        for k in np.argsort(a[rows, cols], kind="stable"):
            keep[rows[k], cols[k]] = False
            if graphs.is_dag(keep):
                break
    return graphs.Dag.from_adjacency(keep, names=names)


def gap_threshold(w, window=0.1):
    """Cut point at the largest ratio gap among the strongest entries.

    Sorted off-diagonal magnitudes within a factor ``1/window`` of the
    largest are scanned for the biggest ratio between neighbours; the cut
    sits at the geometric midpoint of that gap.  With a single entry in
    the window only that entry is kept.
    """
    a = np.abs(np.asarray(w, dtype=float))
    vals = np.sort(a[~np.eye(a.shape[0], dtype=bool)])[::-1]
    top = vals[0] if vals.size else 0.0
    if top <= 0:
        return 0.0
    vals = vals[vals >= window * top]
    if vals.size < 2:
        return window * top
    ratios = vals[:-1] / vals[1:]
    i = int(np.argmax(ratios))
    return float(math.sqrt(vals[i] * vals[i + 1]))


# -- Jacobian readout ---------------------------------------------------------

def _matrix_of(data):
    return data.x if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=float))


def jacobian_readout(model, data, t=1.0):
    """``J[j, k] = mean_i |d f_j / d x_k|`` over the rows of ``data``.

    The diagonal is reported; callers mask it before applying the
    acyclicity constraint.
    """
    x = _matrix_of(data)
    if x.shape[1] != model.dim:
        raise ContractError(f"model width {model.dim} does not match data width {x.shape[1]}")
    return np.abs(model.jacobian(t, x)).mean(axis=0)


def _standardize(x, scale):
    mu = x.mean(axis=0)
    x = x - mu
    if scale:
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        x = x / sd
    return x


def _finish(adj, raw, h_final, converged, cfg, trace, names, model=None, omega=None):
    adj = np.abs(np.asarray(adj, dtype=float))
    np.fill_diagonal(adj, 0.0)
    if omega is None:
        omega = cfg.threshold if cfg.threshold is not None else gap_threshold(adj)
    dag = threshold(adj, omega, names=tuple(names))
    return FitResult(adj, dag, float(h_final), bool(converged), float(omega), trace,
                     raw, model, list(names))


# -- linear NOTEARS -----------------------------------------------------------

def fit_notears_linear(data, cfg=None):
    """Least-squares linear SEM with l1 penalty under ``h(W) = 0``.

    ``W`` is split as ``W+ - W-`` with both parts nonnegative so the l1
    term is smooth; the diagonal is pinned to zero.
    """
    cfg = cfg or LearnerConfig.notears()
    x = _standardize(_matrix_of(data), cfg.standardize)
    names = data.names if isinstance(data, Dataset) else [str(i) for i in range(x.shape[1])]
    n, d = x.shape
    cov = x.T @ x / n

    def unpack(theta):
        return theta[:d * d].reshape(d, d) - theta[d * d:].reshape(d, d)

    def objective(theta):
        w = unpack(theta)
        r = np.eye(d) - w
        loss = 0.5 * np.trace(r.T @ cov @ r) + cfg.lambda1 * theta.sum()
        g = -cov @ r
        return loss, np.concatenate([g.ravel(), -g.ravel()]) + cfg.lambda1

    def constraint(theta):
        w = unpack(theta)
        cv = acyclicity.h_exp(w) if cfg.constraint == "exp" else acyclicity.h_poly(w, 1.0 / d)
        return cv.h, np.concatenate([cv.grad.ravel(), -cv.grad.ravel()])

    upper = np.full(2 * d * d, np.inf)
    diag = np.concatenate([np.eye(d).ravel(), np.eye(d).ravel()]).astype(bool)
    upper[diag] = 0.0
    res = augmented_lagrangian(Problem(objective, constraint), np.zeros(2 * d * d), cfg,
                               lower=0.0, upper=upper)
    w = unpack(res.theta)
    return _finish(np.abs(w), w, acyclicity.h_exp(w).h, res.converged, cfg, res.trace, names)


# -- ODE-flow learner ---------------------------------------------------------

class _FlowProblem:
    """Minibatch negative CNF log-likelihood plus Jacobian penalties.

    With Adam a fresh minibatch is drawn at every step.  L-BFGS needs a
    deterministic objective, so its minibatch is drawn once per inner
    solve and held fixed.
    """

    def __init__(self, model, x, cfg, rng):
        self.model, self.x, self.cfg, self.rng = model, x, cfg, rng
        d = x.shape[1]
        self.offdiag = 1.0 - np.eye(d)
        self.batch = min(cfg.batch_size, x.shape[0])
        self.fixed = None

    def _draw(self):
        if self.batch >= self.x.shape[0]:
            return self.x
        return self.x[np.sort(self.rng.choice(self.x.shape[0], self.batch, replace=False))]

    def begin_inner(self):
        if self.cfg.optimizer == "lbfgs":
            self.fixed = self._draw()

    def _constraint_graph(self, j_off):
        if self.cfg.constraint == "exp":
            return acyclicity.h_exp_graph(j_off)
        return acyclicity.h_poly_graph(j_off, 1.0 / j_off.shape[0])

    def _jbar_graph(self, xb, th):
        jac = self.model.jacobian_graph(1.0, xb, th)
        return nd.mean(nd.absolute(jac), axis=0) * self.offdiag

    def evaluate(self, theta):
        cfg = self.cfg
        xb = self.fixed if self.fixed is not None else self._draw()
        tape = nd.Tape()
        th = tape.var(theta)
        j_off = self._jbar_graph(xb, th)
        h = self._constraint_graph(j_off)
        penalty = cfg.lambda1 * nd.sum(j_off)
        if cfg.gradient == "direct":
            logp = odeflow.cnf_logp(self.model, xb, 0.0, 1.0, cfg.ode_steps, cfg.method, theta=th)
            nll = -nd.mean(logp)
            gf, gh = tape.grad(nll + penalty, [th]), tape.grad(h, [th])
            tape.release()
            return float(nll.value + penalty.value), gf[0], float(h.value), gh[0]
        nll, g_nll = self._adjoint_nll(xb, theta)
        gp, gh = tape.grad(penalty, [th])[0], tape.grad(h, [th])[0]
        tape.release()
        return nll + float(penalty.value), g_nll + gp, float(h.value), gh

    def _adjoint_nll(self, xb, theta):
        model, cfg = self.model, self.cfg
        b = xb.shape[0]

        def system(t, y, th):
            return model.graph_with_trace(t, y[0], th)

        res = odeflow.cnf_flow(model, xb, 0.0, 1.0, cfg.ode_steps, cfg.method, theta=theta)
        nll = -float(np.mean(odeflow.std_normal_logpdf(res.z) + res.logdet))
        # d(-mean logp)/dz0 = z0 / B, d(-mean logp)/dlogdet = -1 / B
        _, g = odeflow.adjoint_system_grad(system, (xb, np.zeros(b)), theta, 1.0, 0.0,
                                           cfg.ode_steps, (res.z / b, -np.ones(b) / b),
                                           cfg.method)
        return nll, g

    def jbar(self, theta):
        return np.abs(self.model.jacobian(1.0, self.x, theta)).mean(axis=0)

    def h_exact(self, theta):
        j = self.jbar(theta) * self.offdiag
        if self.cfg.constraint == "exp":
            return acyclicity.h_exp(j).h
        return acyclicity.h_poly(j, 1.0 / j.shape[0]).h


def fit_dag_ode(data, cfg=None):
    """Maximum-likelihood CNF whose drift Jacobian is constrained to a DAG.

    Maximizes the mean log-density of minibatches under an ODE flow with
    a standard normal base, minus ``lambda1`` times the off-diagonal l1
    norm of the averaged absolute drift Jacobian, subject to
    ``h(Jbar) = 0``.  The graph is read from ``Jbar`` over all rows.
    """
    cfg = cfg or LearnerConfig.dag_ode()
    x = _standardize(_matrix_of(data), cfg.standardize)
    names = data.names if isinstance(data, Dataset) else [str(i) for i in range(x.shape[1])]
    n, d = x.shape
    if d > 50:
        raise ContractError("fit_dag_ode computes exact traces and supports d <= 50")
    model = odeflow.OdeModel.init(d, cfg.hidden, cfg.activation, cfg.seed, cfg.init_scale,
                                  cfg.time_conditioned, names)
    problem = _FlowProblem(model, x, cfg, make_rng([cfg.seed, 1]))
    res = augmented_lagrangian(problem, model.theta, cfg)
    model.theta = res.theta
    jbar = problem.jbar(res.theta)
    if not np.isfinite(jbar).all():
        raise NumericError("non-finite Jacobian after training")
    h_final = acyclicity.h_jacobian(jbar).h
    return _finish(jbar.T, jbar, h_final, h_final <= cfg.h_tol, cfg, res.trace, names, model)
