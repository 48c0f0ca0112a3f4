# %% [markdown]
# # Linear structure learning
#
# A smooth score for "is this weighted graph acyclic", and what the
# linear learner does with it on a random ER1 graph.

# %%
import numpy as np

from dagode import acyclicity, datagen, graphs, learners

# %% [markdown]
# ## The acyclicity measure
#
# `h(W) = Tr exp(W*W) - d` is zero on DAG supports and grows with the
# weight of every closed walk.

# %%
chain = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
loop = chain.copy()
for eps in (0.0, 0.01, 0.1, 1.0):
    loop[2, 0] = eps
    print(f"back edge {eps:5.2f}  h = {acyclicity.h_exp(loop).h:.3e}")

# %% [markdown]
# ## Recovering an ER1 graph

# %%
rng = np.random.default_rng(0)
truth = graphs.sample_er(10, 1, rng)
data = datagen.gen_linear_sem(truth, 1000, seed=0)
fit = learners.fit_notears_linear(data)
print(graphs.shd(fit.dag, truth))
print("h =", fit.h_final, "converged:", fit.converged)

# %%
w_true = np.array(data.meta["weights"])
for a, b in sorted(truth.edges):
    print(f"{data.names[a]} -> {data.names[b]}  true {w_true[a, b]:+.2f}  fit {fit.raw[a, b]:+.2f}")

# %% [markdown]
# The outer loop raises the penalty until h stops being the problem:

# %%
for e in fit.trace:
    print(f"outer {e.outer:2d}  rho {e.rho:8.0e}  h {e.h:.2e}  {'ok' if e.accepted else 'retry'}")
