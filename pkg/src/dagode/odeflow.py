"""Fixed-step ODE integration, adjoint gradients and CNF log-densities.

A *drift* is any object exposing

* ``theta`` -- flat parameter vector (possibly empty),
* ``graph(t, h, theta)`` -- the vector field, written with :mod:`ndtensor`
  primitives so it evaluates on arrays or records on a tape,
* ``dim`` -- state width.

:class:`OdeModel` (an MLP) and :class:`LinearDrift` are the built-in
drifts; :class:`FunctionDrift` wraps a plain callable.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, NumericError

ACTIVATIONS = ("tanh", "elu")
CHECKPOINT_VERSION = 1


class Drift:
    theta = np.zeros(0)
    dim = 0

    def graph(self, t, h, theta):
        raise NotImplementedError

    def __call__(self, t, h):
        return self.graph(t, np.asarray(h, dtype=float), self.theta)

    def jacobian(self, t, h, theta=None):
        """Per-row Jacobian ``J[b, j, k] = d f_j / d h_k`` of a batch ``h`` (B, d).

        The generic version runs one reverse pass per output coordinate;
        rows do not interact, so each pass yields a whole Jacobian row
        for every sample at once.
        """
        theta = self.theta if theta is None else theta
        h = np.atleast_2d(np.asarray(h, dtype=float))
        tape = nd.Tape()
        hn = tape.var(h)
        out = self.graph(t, hn, theta)
        jac = np.empty((h.shape[0], self.dim, h.shape[1]))
        for j in range(self.dim):
            (g,) = tape.grad(nd.sum(out[:, j]), [hn])
            jac[:, j, :] = g
        tape.release()
        return jac

    def graph_with_trace(self, t, h, theta):
        """Drift value and per-row Jacobian trace (both recordable)."""
        jac = self.jacobian(t, nd.value_of(h), nd.value_of(theta))
        return self.graph(t, h, theta), np.trace(jac, axis1=1, axis2=2)


class FunctionDrift(Drift):
    """Wrap ``fn(t, h)`` written with :mod:`ndtensor` primitives."""

    def __init__(self, fn, dim):
        self.fn = fn
        self.dim = dim
        self.theta = np.zeros(0)

    def graph(self, t, h, theta):
        return self.fn(t, h)


class LinearDrift(Drift):
    """``f(h) = A h``; the parameters are the entries of ``A``."""

    def __init__(self, a):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractError("LinearDrift needs a square matrix")
        self.dim = a.shape[0]
        self.theta = a.ravel().copy()

    @property
    def a(self):
        return self.theta.reshape(self.dim, self.dim)

    def graph(self, t, h, theta):
        a = nd.reshape(theta, (self.dim, self.dim))
        return h @ nd.swapaxes(a, 0, 1)

    def jacobian(self, t, h, theta=None):
        theta = self.theta if theta is None else theta
        h = np.atleast_2d(h)
        return np.broadcast_to(np.reshape(theta, (self.dim, self.dim)),
                               (h.shape[0], self.dim, self.dim)).copy()

    def graph_with_trace(self, t, h, theta):
        a = nd.reshape(theta, (self.dim, self.dim))
        tr = nd.sum(a * np.eye(self.dim))
        n = nd.value_of(h).shape[0] if nd.value_of(h).ndim == 2 else 1
        return h @ nd.swapaxes(a, 0, 1), tr * np.ones(n)


@dataclass(eq=False)
class OdeModel(Drift):
    """MLP drift ``f(t, h; theta)``.

    ``layer_sizes`` runs from the input width (``d``, or ``d + 1`` when
    time-conditioned) to the output width ``d``.  Parameters are stored
    flat, layer by layer, as the row-major weight matrix followed by the
    bias vector.
    """

    layer_sizes: tuple
    activation: str = "tanh"
    theta: np.ndarray = field(default=None, repr=False)
    time_conditioned: bool = False

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        width = self.layer_sizes[0] - (1 if self.time_conditioned else 0)
        if width != self.layer_sizes[-1]:
            raise ContractError("output width must equal the data width")
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {self.theta.shape}")

    @property
    def dim(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @classmethod
    def init(cls, d, hidden=(32,), activation="tanh", seed=0, scale=0.1,
             time_conditioned=False, names=None):
        """Small random weights, zero biases.

        Entries touching data column ``k`` (its input weights and its output
        row) are drawn from a stream keyed by the column's name, so
        permuting the columns permutes the initial model the same way.
        """
        sizes = (d + (1 if time_conditioned else 0), *hidden, d)
        model = cls(sizes, activation, None, time_conditioned)
        names = list(names) if names is not None else [str(k) for k in range(d)]
        col_rngs = [np.random.default_rng([seed, zlib.crc32(n.encode())]) for n in names]
        shared = np.random.default_rng([seed, 0x5EED])
        layers = []
        for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = np.empty((fan_out, fan_in))
            if li == 0:
                for k in range(d):
                    w[:, k] = col_rngs[k].normal(0.0, scale, fan_out)
                if time_conditioned:
                    w[:, d] = shared.normal(0.0, scale, fan_out)
            elif li == len(sizes) - 2:
                for k in range(d):
                    w[k, :] = col_rngs[k].normal(0.0, scale, fan_in)
            else:
                w[:] = shared.normal(0.0, scale, (fan_out, fan_in))
            layers.append(np.concatenate([w.ravel(), np.zeros(fan_out)]))
        model.theta = np.concatenate(layers)
        return model

    def unpack(self, theta):
        """Split a flat parameter vector (array or node) into (W, b) pairs."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = nd.reshape(theta[pos:pos + fan_in * fan_out], (fan_out, fan_in))
            pos += fan_in * fan_out
            b = theta[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def _params(self, theta):
        # derived views are rebuilt only when a different theta object arrives
        cache = self.__dict__.get("_cache")
        if cache is not None and cache[0] is theta:
            return cache[1]
        layers = self.unpack(theta)
        d = self.dim
        w_in = layers[0][0][:, :d] if self.time_conditioned else layers[0][0]
        p = {
            "layers": layers,
            "wt": [nd.swapaxes(w, 0, 1) for w, _ in layers],
            "w_in": w_in,
            "trace_coef": (nd.sum(layers[1][0] * nd.swapaxes(w_in, 0, 1), axis=0)
                           if len(layers) == 2 else None),
        }
        self.__dict__["_cache"] = (theta, p)
        return p

    def _act(self, a):
        if self.activation == "tanh":
            y = nd.tanh(a)
            return y, 1.0 - y * y
        y = nd.elu(a)
        return y, nd.where(nd.value_of(a) > 0, 1.0, y + 1.0)

    def _inputs(self, t, h):
        if not self.time_conditioned:
            return h
        hv = nd.value_of(h)
        col = np.full(hv.shape[:-1] + (1,), float(t))
        return nd.concatenate([h, col], axis=-1)

    def _run(self, t, h, theta, want):
        p = self._params(theta)
        layers = p["layers"]
        x = self._inputs(t, h)
        slopes = []
        for (_, b), wt in zip(layers[:-1], p["wt"]):
            x, s = self._act(x @ wt + b)
            slopes.append(s)
        out = x @ p["wt"][-1] + layers[-1][1]
        if want is None:
            return out, None
        if want == "trace" and p["trace_coef"] is not None:
            # Tr(W2 diag(s) W1) = s . diag(W1 W2)
            return out, slopes[0] @ p["trace_coef"]
        jac = self._jac(layers, p["w_in"], slopes)
        if not slopes:
            # affine drift: the same Jacobian for every row
            jac = jac * np.ones(nd.value_of(h).shape[:-1] + (1, 1))
        if want == "trace":
            return out, nd.sum(jac * np.eye(self.dim), axis=(-2, -1))
        return out, jac

    @staticmethod
    def _jac(layers, w_in, slopes):
        m = w_in
        for (w, _), s in zip(layers[1:], slopes):
            m = nd.reshape(s, nd.value_of(s).shape + (1,)) * m
            m = w @ m
        return m

    def graph(self, t, h, theta):
        return self._run(t, h, theta, None)[0]

    def graph_with_trace(self, t, h, theta):
        return self._run(t, h, theta, "trace")

    def jacobian(self, t, h, theta=None):
        theta = self.theta if theta is None else theta
        h = np.atleast_2d(nd.value_of(h))
        return self._run(t, h, nd.value_of(theta), "jac")[1]

    def jacobian_graph(self, t, h, theta):
        """Recordable (B, d, d) Jacobian of the drift at the rows of ``h``."""
        return self._run(t, h, theta, "jac")[1]


# -- fixed-step integration ---------------------------------------------------

def _check_finite(x, step):
    v = nd.value_of(x)
    if not np.isfinite(v).all():
        raise NumericError(f"non-finite state at step {step}", where=step)


def _step(fn, t, y, dt, method):
    """One explicit step for a state tuple ``y``; ``fn(t, y)`` returns a tuple."""
    lc = nd.lincomb
    if method == "euler":
        k1 = fn(t, y)
        return tuple(lc([(1.0, a), (dt, b)]) for a, b in zip(y, k1))
    if method != "rk4":
        raise ContractError(f"unknown method {method!r}")
    half = 0.5 * dt
    k1 = fn(t, y)
    k2 = fn(t + half, tuple(lc([(1.0, a), (half, b)]) for a, b in zip(y, k1)))
    k3 = fn(t + half, tuple(lc([(1.0, a), (half, b)]) for a, b in zip(y, k2)))
    k4 = fn(t + dt, tuple(lc([(1.0, a), (dt, b)]) for a, b in zip(y, k3)))
    sixth = dt / 6.0
    return tuple(lc([(1.0, a), (sixth, b1), (2 * sixth, b2), (2 * sixth, b3), (sixth, b4)])
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


def march(fn, y0, t0, t1, steps, method="rk4", keep=False):
    """Integrate the tuple-valued system ``fn`` from ``t0`` to ``t1`` (either direction).

    Works on arrays and on tape nodes alike.  Returns the final state
    tuple, or the list of all states when ``keep`` is set.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    dt = (t1 - t0) / steps
    y = tuple(y0)
    states = [y] if keep else None
    for i in range(steps):
        y = _step(fn, t0 + i * dt, y, dt, method)
        for part in y:
            _check_finite(part, i + 1)
        if keep:
            states.append(y)
    return states if keep else y


def _drift_fn(f, theta=None):
    theta = f.theta if theta is None else theta
    return lambda t, y: (f.graph(t, y[0], theta),)


def integrate(f, h0, t0, t1, steps, method="rk4", theta=None):
    """Solve ``dh/dt = f(t, h)`` from ``t0`` to ``t1 > t0`` with fixed steps."""
    if not t1 > t0:
        raise ContractError("integrate needs t1 > t0")
    if not isinstance(h0, nd.Node):
        h0 = np.asarray(h0, dtype=float)
    return march(_drift_fn(f, theta), (h0,), t0, t1, steps, method)[0]


def trajectory(f, h0, t0, t1, steps, method="rk4"):
    """All ``steps + 1`` states of :func:`integrate` stacked row-wise."""
    if not t1 > t0:
        raise ContractError("trajectory needs t1 > t0")
    states = march(_drift_fn(f), (np.asarray(h0, dtype=float),), t0, t1, steps, method, keep=True)
    return np.array([s[0] for s in states])


def direct_grad(f, h0, t0, t1, steps, grad_out, method="rk4"):
    """dL/dh0 and dL/dtheta by reverse-mode through the unrolled solver."""
    tape = nd.Tape()
    hn = tape.var(h0)
    th = tape.var(f.theta)
    if t1 == t0:
        return np.array(grad_out, dtype=float), np.zeros_like(f.theta)
    out = march(_drift_fn(f, th), (hn,), t0, t1, steps, method)[0]
    loss = nd.sum(out * np.asarray(grad_out, dtype=float))
    gh, gth = tape.grad(loss, [hn, th])
    tape.release()
    return gh, gth


def adjoint_system_grad(system, y0, theta, ta, tb, steps, grad_end, method="rk4"):
    """Adjoint gradients for a tuple-valued system ``dy/dt = system(t, y, theta)``.

    ``y`` is integrated from ``ta`` to ``tb`` (either direction); ``grad_end``
    holds dL/dy(tb) per component.  State, adjoint ``a = dL/dy`` and the
    parameter integral are then solved jointly from ``tb`` back to ``ta``::

        dy/dt = F,   da/dt = -a^T dF/dy,   dg/dt = -a^T dF/dtheta

    Returns ``(dL/dy(ta) per component, dL/dtheta)``.
    """
    theta = np.asarray(theta, dtype=float)
    y0 = tuple(np.asarray(v, dtype=float) for v in y0)
    a_end = tuple(np.array(g, dtype=float) for g in grad_end)
    if ta == tb:
        return a_end, np.zeros_like(theta)
    y_end = march(lambda t, y: system(t, y, theta), y0, ta, tb, steps, method)
    k = len(y0)

    def aug(t, state):
        y, a = state[:k], state[k:2 * k]
        tape = nd.Tape()
        yn = [tape.var(v) for v in y]
        th = tape.var(theta)
        out = system(t, tuple(yn), th)
        total = None
        for o, ai in zip(out, a):
            term = nd.sum(o * ai)
            total = term if total is None else total + term
        grads = tape.grad(total, yn + [th])
        tape.release()
        values = tuple(nd.value_of(o) * np.ones_like(v) for o, v in zip(out, y))
        return values + tuple(-g for g in grads[:k]) + (-grads[k],)

    final = march(aug, tuple(y_end) + a_end + (np.zeros_like(theta),), tb, ta, steps, method)
    return final[k:2 * k], final[2 * k]


def adjoint_grad(f, h0, t0, t1, steps, grad_out, method="rk4"):
    """Gradients of ``L(h(t1))`` by solving the adjoint system backward in time.

    Returns ``(dL/dh0, dL/dtheta)``.
    """
    if t1 < t0:
        raise ContractError("adjoint_grad needs t1 >= t0")
    (gh,), gth = adjoint_system_grad(lambda t, y, th: (f.graph(t, y[0], th),),
                                     (h0,), f.theta, t0, t1, steps, (grad_out,), method)
    return gh, gth


# -- continuous normalizing flow ----------------------------------------------

@dataclass
class FlowResult:
    """Outcome of pulling data back through the flow.

    ``z`` is the base-space point at ``t0``; ``logdet`` is
    ``-integral of Tr(df/dz) dt`` over ``[t0, t1]``; ``states`` holds the
    ``steps + 1`` visited states when requested.
    """

    z: np.ndarray
    logdet: np.ndarray
    states: list = None


def std_normal_logpdf(z):
    d = nd.value_of(z).shape[-1]
    return -0.5 * nd.sum(z * z, axis=-1) - 0.5 * d * math.log(2.0 * math.pi)


def cnf_flow(f, x, t0, t1, steps, method="rk4", theta=None, keep=False):
    """Integrate state and exact Jacobian trace from the data at ``t1`` back to ``t0``.

    ``x`` may be a single point (d,) or a batch (B, d); with ``theta`` a
    tape node the whole computation is recorded.
    """
    if not t1 > t0:
        raise ContractError("cnf_flow needs t1 > t0")
    theta = f.theta if theta is None else theta
    if not isinstance(x, nd.Node):
        x = np.asarray(x, dtype=float)
    single = nd.value_of(x).ndim == 1
    if single:
        x = nd.reshape(x, (1, -1))
    n = nd.value_of(x).shape[0]

    def aug(t, y):
        fv, tr = f.graph_with_trace(t, y[0], theta)
        return fv, tr

    y0 = (x, np.zeros(n))
    result = march(aug, y0, t1, t0, steps, method, keep=keep)
    z, logdet = (result[-1] if keep else result)
    if single:
        z, logdet = z[0], logdet[0]
    return FlowResult(z, logdet, result if keep else None)


def cnf_logp(f, x, t0=0.0, t1=1.0, steps=40, method="rk4", theta=None):
    """Log-density of ``x`` under the flow with a standard normal base at ``t0``."""
    res = cnf_flow(f, x, t0, t1, steps, method, theta)
    return std_normal_logpdf(res.z) + res.logdet


# -- checkpoints --------------------------------------------------------------

def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(model, path, seed=None, cfg_hash=None):
    """JSON record; floats are written with round-trip precision."""
    record = {
        "format": "dagode-odemodel",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "time_conditioned": model.time_conditioned,
        "theta": [float(v) for v in model.theta],
        "seed": seed,
        "config_hash": cfg_hash,
    }
    Path(path).write_text(json.dumps(record, indent=1), encoding="utf-8")


def load_checkpoint(path):
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if record.get("format") != "dagode-odemodel":
        raise ContractError(f"{path} is not a model checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {record.get('version')}")
    model = OdeModel(tuple(record["layer_sizes"]), record["activation"],
                     np.array(record["theta"], dtype=float), record["time_conditioned"])
    return model, record
