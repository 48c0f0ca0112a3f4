"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line that is echoed in the
pytest terminal summary.  Criteria 8 and 9 train the flow learner and
take tens of minutes on one core.  Run ``python tests/test_acceptance.py``
to print the lines without pytest.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.stats import norm

from dagode import acyclicity, cli, datagen, graphs, learners, odeflow
from dagode import ndtensor as nd
from dagode.learners import Adam

from conftest import record_acceptance

LINEAR_INI = """\
[generator]
type = linear_sem
d = 10
k = 1
n = 1000
noise = gaussian
seed = 0
repeats = 10

[learner]
algorithm = notears
"""

FLOW_INI = """\
[generator]
type = gp_anm
d = 10
k = 1
n = 1000
seed = 0
repeats = 5

[learner]
algorithm = dagode
"""

SACHS_SEED = 0
_cache = {}


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def fd_grad(fn, x, eps=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        up = fn(x)
        x[i] = old - eps
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


# -- 1 ------------------------------------------------------------------------

def dfs_acyclic(adj):
    # independent oracle: Kahn-style peeling of sinks
    alive = list(range(adj.shape[0]))
    while alive:
        sinks = [i for i in alive if not any(adj[i, j] for j in alive)]
        if not sinks:
            return False
        alive = [i for i in alive if i not in sinks]
    return True


def test_criterion_01_acyclicity_oracle():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    disagree = 0
    for discrete in (True, False):
        for _ in range(1000):
            if discrete:
                w = rng.integers(-1, 2, size=(5, 5)).astype(float)
            else:
                w = rng.normal(size=(5, 5)) * (rng.random((5, 5)) < 0.25)
            acyclic = dfs_acyclic(w != 0)
            assert graphs.is_dag(w != 0) == acyclic
            disagree += (acyclicity.h_exp(w).h < 1e-8) != acyclic
    elapsed = time.perf_counter() - start
    ok = disagree == 0 and elapsed < 5
    record_acceptance(1, ok, f"{disagree} disagreements over 2000 matrices, {elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_gradient_fidelity():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst_h = worst_mlp = worst_jac = 0.0
    for _ in range(100):
        w = rng.uniform(-1, 1, size=(4, 4))
        fd = fd_grad(lambda v: np.trace(expm(v * v)), w)
        worst_h = max(worst_h, rel_err(acyclicity.h_exp(w).grad, fd))

        model = odeflow.OdeModel.init(3, (5, 4), seed=int(rng.integers(1 << 30)), scale=0.8)
        theta = model.theta + rng.normal(scale=0.1, size=model.n_params)
        x = rng.normal(size=(2, 3))
        wt = rng.normal(size=(2, 3))
        tape = nd.Tape()
        th = tape.var(theta)
        (g,) = tape.grad(nd.sum(model.graph(0.0, x, th) * wt), [th])
        fd = fd_grad(lambda v: float(np.sum(model.graph(0.0, x, v) * wt)), theta)
        worst_mlp = max(worst_mlp, rel_err(g, fd))

        jac = model.jacobian(1.0, x, theta)
        for b in range(2):
            for j in range(3):
                fd = fd_grad(lambda v: model.graph(1.0, v[None], theta)[0, j], x[b])
                worst_jac = max(worst_jac, rel_err(jac[b, j], fd))
    elapsed = time.perf_counter() - start
    ok = worst_h < 1e-5 and worst_mlp < 1e-5 and worst_jac < 1e-4 and elapsed < 30
    record_acceptance(2, ok, f"max rel err h {worst_h:.1e}, MLP {worst_mlp:.1e}, "
                             f"Jacobian {worst_jac:.1e}, {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_solver_order():
    start = time.perf_counter()
    decay = odeflow.FunctionDrift(lambda t, h: -1.0 * h, 1)

    def err(steps, method):
        return abs(odeflow.integrate(decay, np.ones(1), 0.0, 1.0, steps, method)[0] - math.exp(-1))

    rk4 = err(10, "rk4") / err(20, "rk4")
    euler = err(10, "euler") / err(20, "euler")
    elapsed = time.perf_counter() - start
    ok = 12 <= rk4 <= 20 and 1.8 <= euler <= 2.2 and elapsed < 5
    record_acceptance(3, ok, f"RK4 ratio {rk4:.2f}, Euler ratio {euler:.3f}")
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_adjoint():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        model = odeflow.OdeModel.init(3, (8,), seed=i, scale=0.6, time_conditioned=bool(i % 2))
        model.theta = model.theta + rng.normal(scale=0.1, size=model.n_params)
        h0, g = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        ah, ath = odeflow.adjoint_grad(model, h0, 0.0, 1.0, 40, g)
        dh, dth = odeflow.direct_grad(model, h0, 0.0, 1.0, 40, g)
        worst = max(worst, rel_err(ah, dh), rel_err(ath, dth))
    worst_lin = 0.0
    for _ in range(5):
        a = rng.normal(scale=0.5, size=(3, 3))
        g = rng.normal(size=3)
        ah, _ = odeflow.adjoint_grad(odeflow.LinearDrift(a), rng.normal(size=3), 0.0, 1.0, 40, g)
        worst_lin = max(worst_lin, rel_err(ah, expm(a.T) @ g))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and worst_lin < 1e-6 and elapsed < 60
    record_acceptance(4, ok, f"adjoint vs direct {worst:.1e}, linear closed form {worst_lin:.1e}, "
                             f"{elapsed:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------

def test_criterion_05_cnf():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    zero = odeflow.FunctionDrift(lambda t, h: h * 0.0, 2)
    x = rng.normal(size=(20, 2))
    err_zero = float(np.abs(odeflow.cnf_logp(zero, x, steps=10) - norm.logpdf(x).sum(1)).max())

    a, b = 0.6, -0.4
    affine = odeflow.FunctionDrift(lambda t, h: a * h + b, 1)
    s, m = math.exp(a), b * (math.exp(a) - 1) / a
    xs = np.linspace(-4, 4, 17)[:, None]
    err_affine = float(np.abs(odeflow.cnf_logp(affine, xs, steps=40)
                              - norm.logpdf(xs[:, 0], m, s)).max())

    data = np.concatenate([rng.normal(-1.5, 0.5, 200), rng.normal(1.0, 0.7, 200)])[:, None]
    model = odeflow.OdeModel.init(1, (16,), seed=0, scale=0.5)
    opt = Adam(0.05)
    for _ in range(100):
        tape = nd.Tape()
        th = tape.var(model.theta)
        nll = -nd.mean(odeflow.cnf_logp(model, data, steps=10, theta=th))
        (g,) = tape.grad(nll, [th])
        model.theta = opt.step(model.theta, g)
    dens = lambda v: math.exp(odeflow.cnf_logp(model, np.array([[v]]), steps=10)[0])
    total, _ = quad(dens, -10, 10, limit=200)
    elapsed = time.perf_counter() - start
    ok = err_zero < 1e-12 and err_affine < 1e-6 and abs(total - 1) <= 0.01 and elapsed < 120
    record_acceptance(5, ok, f"zero drift {err_zero:.1e}, affine {err_affine:.1e}, "
                             f"integral {total:.5f} (nll {nll.value:.3f}), {elapsed:.1f}s")
    assert ok


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_epidemic_readout():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    drift = datagen.epidemic_drift(datagen.EpidemicParams())
    states = rng.uniform(0.1, 1000, size=(100, 3))
    jac = drift.jacobian(0.0, states)
    pattern = np.array([[1, 1, 1], [1, 1, 0], [0, 1, 1]], dtype=bool)
    off = float(np.abs(jac[:, ~pattern]).max())
    on = bool(np.all(np.abs(jac[:, pattern]) > 1e-12))
    support = np.abs(jac).max(axis=0) > 1e-12
    elapsed = time.perf_counter() - start
    ok = on and off < 1e-12 and np.array_equal(support, pattern) and elapsed < 5
    record_acceptance(6, ok, f"support {'exact' if np.array_equal(support, pattern) else 'wrong'}, "
                             f"max off-pattern {off:.1e}, {elapsed:.2f}s")
    assert ok


# -- 7-9 runners --------------------------------------------------------------------

def run_linear(tmp):
    return cli.run_benchmark(cli.parse_config(LINEAR_INI), tmp)


def run_flow(tmp):
    return cli.run_benchmark(cli.parse_config(FLOW_INI), tmp)


def run_sachs():
    data = cli.sachs_dataset()
    fit = learners.fit_dag_ode(data, learners.LearnerConfig.dag_ode(seed=SACHS_SEED))
    m = graphs.shd(fit.dag, data.truth)
    block = json.dumps({"metrics": m.as_dict(), "h_final": fit.h_final,
                        "converged": fit.converged, "threshold": fit.threshold},
                       sort_keys=True, indent=1)
    return m, fit, block


def cached(key, fn, *args):
    if key not in _cache:
        start = time.perf_counter()
        _cache[key] = (fn(*args), time.perf_counter() - start)
    return _cache[key]


def random_dag_shd(truth_adj, m, rng, draws=500):
    truth = graphs.Dag.from_adjacency(truth_adj)
    return float(np.mean([graphs.shd(graphs.sample_dag_with_edges(truth.d, m, rng), truth).shd
                          for _ in range(draws)]))


# -- 7 ------------------------------------------------------------------------

def test_criterion_07_linear_recovery(tmp_path_factory):
    report, elapsed = cached("linear", run_linear, tmp_path_factory.mktemp("linear"))
    runs = [r for r in report.runs if r["status"] == "ok"]
    shd = [r["metrics"]["shd"] for r in runs]
    tpr = [r["metrics"]["tpr"] for r in runs]
    beats_empty = all(r["metrics"]["shd"] < r["true_edges"] for r in runs)
    ok = (len(runs) == 10 and np.median(tpr) >= 0.8 and np.median(shd) <= 4 and beats_empty
          and elapsed < 600)
    record_acceptance(7, ok, f"median TPR {np.median(tpr):.2f}, median SHD {np.median(shd):.1f}, "
                             f"SHDs {shd}, beats empty graph on all: {beats_empty}, {elapsed:.0f}s")
    assert ok


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_nonlinear_recovery(tmp_path_factory):
    out = tmp_path_factory.mktemp("flow")
    report, elapsed = cached("flow", run_flow, out)
    runs = [r for r in report.runs if r["status"] == "ok"]
    shd = [r["metrics"]["shd"] for r in runs]
    rng = np.random.default_rng(8)
    baseline = []
    for r in runs:
        truth = graphs.load_dag(out / f"seed_{r['seed']:04d}" / "truth.tsv").adjacency()
        baseline.append(random_dag_shd(truth, r["metrics"]["predicted_edges"], rng))
    med, med_base = float(np.median(shd)), float(np.median(baseline))
    h_ok = all(r["h_final"] <= 1e-8 for r in runs if r["converged"])
    n_conv = sum(r["converged"] for r in runs)
    ok = len(runs) == 5 and med < 10 and med < med_base and h_ok and elapsed < 7200
    record_acceptance(8, ok, f"median SHD {med:.1f} (SHDs {shd}) vs empty 10 and random-DAG "
                             f"{med_base:.1f}; converged {n_conv}/5 with h<=1e-8: {h_ok}; "
                             f"{elapsed:.0f}s")
    assert ok


# -- 9 ------------------------------------------------------------------------

def test_criterion_09_sachs():
    data, consensus = cli.sachs_paths()
    ds = cli.load_dataset(data)
    reported = cli.evaluate(cli.data_path("sachs_reported.tsv"), consensus)
    anchor = (ds.x.shape == (7466, 11) and reported.shd == 13
              and math.isclose(reported.tpr, 4 / 17))
    (m, fit, _), elapsed = cached("sachs", run_sachs)
    fresh = m.shd <= 17 and m.predicted_edges <= 20
    ok = anchor and fresh and elapsed < 7200
    record_acceptance(9, ok, f"reported 4 edges: SHD {reported.shd}, TPR {reported.tpr:.4f}; "
                             f"fresh fit: SHD {m.shd}, TPR {m.tpr:.3f}, {m.predicted_edges} edges, "
                             f"h {fit.h_final:.1e}, {elapsed:.0f}s")
    assert ok


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path_factory):
    first_lin, _ = cached("linear", run_linear, tmp_path_factory.mktemp("linear"))
    first_flow, _ = cached("flow", run_flow, tmp_path_factory.mktemp("flow"))
    (_, _, first_sachs), _ = cached("sachs", run_sachs)
    same = {
        "linear": run_linear(tmp_path_factory.mktemp("linear2")).metrics_block()
        == first_lin.metrics_block(),
        "nonlinear": run_flow(tmp_path_factory.mktemp("flow2")).metrics_block()
        == first_flow.metrics_block(),
        "sachs": run_sachs()[2] == first_sachs,
    }
    ok = all(same.values())
    record_acceptance(10, ok, "byte-identical metric blocks: "
                              + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    class _Factory:
        def __init__(self):
            self.root = Path(tempfile.mkdtemp())
            self.count = itertools.count()

        def mktemp(self, name):
            p = self.root / f"{name}{next(self.count)}"
            p.mkdir()
            return p

    factory = _Factory()
    tests = [test_criterion_01_acyclicity_oracle, test_criterion_02_gradient_fidelity,
             test_criterion_03_solver_order, test_criterion_04_adjoint, test_criterion_05_cnf,
             test_criterion_06_epidemic_readout]
    slow = [test_criterion_07_linear_recovery, test_criterion_08_nonlinear_recovery,
            test_criterion_10_determinism]
    for t in tests:
        try:
            t()
        except AssertionError:
            pass
    if "--fast" not in sys.argv:
        for t in slow[:2]:
            try:
                t(factory)
            except AssertionError:
                pass
        try:
            test_criterion_09_sachs()
        except AssertionError:
            pass
        try:
            slow[2](factory)
        except AssertionError:
            pass
