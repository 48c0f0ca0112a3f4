# %% [markdown]
# # A one-dimensional continuous normalizing flow
#
# Fit an MLP drift so that pulling data back to t=0 lands on N(0, 1),
# then check that the resulting density integrates to one.

# %%
import numpy as np
from scipy.integrate import quad

from dagode import ndtensor as nd
from dagode import odeflow
from dagode.learners import Adam

rng = np.random.default_rng(1)
x = np.concatenate([rng.normal(-1.5, 0.5, 300), rng.normal(1.0, 0.7, 300)])[:, None]
model = odeflow.OdeModel.init(1, (16,), seed=0, scale=0.5)

# %%
opt = Adam(0.05)
for step in range(150):
    tape = nd.Tape()
    th = tape.var(model.theta)
    nll = -nd.mean(odeflow.cnf_logp(model, x, steps=10, theta=th))
    (g,) = tape.grad(nll, [th])
    model.theta = opt.step(model.theta, g)
    if step % 30 == 0:
        print(f"step {step:3d}  nll {nll.value:.4f}")

# %%
density = lambda v: float(np.exp(odeflow.cnf_logp(model, np.array([[v]]), steps=10)[0]))
total, _ = quad(density, -10, 10, limit=200)
print(f"integral of the learned density: {total:.5f}")
for v in (-1.5, 0.0, 1.0):
    print(f"p({v:+.1f}) = {density(v):.3f}")
