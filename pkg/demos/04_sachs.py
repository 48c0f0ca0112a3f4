# %% [markdown]
# # Sachs protein-signaling data
#
# 7466 single-cell measurements of 11 proteins, scored against the
# 17-edge consensus network.  The rows come from several intervention
# conditions and are pooled here as if observational.
#
# Run with `--fit` to also train the flow learner (tens of minutes).

# %%
import sys

from dagode import cli, graphs, learners

data = cli.sachs_dataset()
print(data.n, "rows,", data.d, "variables:", ", ".join(data.names))
print(data.meta["note"])

# %% [markdown]
# ## Scoring a four-edge prediction

# %%
_, consensus = cli.sachs_paths()
m = cli.evaluate(cli.data_path("sachs_reported.tsv"), consensus)
print(cli.metrics_table(m))

# %% [markdown]
# Predicting nothing at all already scores SHD 17, so sparse predictions
# are cheap under this metric.

# %%
print("empty graph SHD:", graphs.shd(graphs.Dag.empty(11), data.truth).shd)

# %%
if "--fit" in sys.argv:
    fit = learners.fit_dag_ode(data, learners.LearnerConfig.dag_ode(seed=0))
    print(graphs.shd(fit.dag, data.truth))
    for a, b in sorted(fit.dag.edges):
        print(f"  {data.names[a]} -> {data.names[b]}  {fit.adjacency[a, b]:.3f}")
