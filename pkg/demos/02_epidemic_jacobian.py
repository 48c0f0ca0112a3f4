# %% [markdown]
# # Reading structure off a known vector field
#
# The susceptible/infected/recovered model with immigration is a
# three-variable ODE.  Its Jacobian tells which variable drives which.

# %%
import numpy as np

from dagode import datagen

params = datagen.EpidemicParams()
traj = datagen.simulate_epidemic(params, t_end=50.0, steps=500)
print("state at t=0, 25, 50:")
print(traj[[0, 250, 500]].round(2))

# %% [markdown]
# Average absolute partials along the trajectory.  Row j is the
# derivative being explained, column k the input.

# %%
drift = datagen.epidemic_drift(params)
jbar = np.abs(drift.jacobian(0.0, traj)).mean(axis=0)
names = datagen.EPIDEMIC_NAMES
print("      " + "  ".join(f"{n:>8}" for n in names))
for j, n in enumerate(names):
    print(f"d{n}/dt " + "  ".join(f"{v:8.4f}" for v in jbar[j]))

# %% [markdown]
# Z never feeds Y and X never feeds Z directly: both entries are exactly 0.
# Self-dependence (the diagonal) is not a causal edge and is masked by the
# learners before the acyclicity constraint is applied.

# %%
assert jbar[1, 2] == 0 and jbar[2, 0] == 0
