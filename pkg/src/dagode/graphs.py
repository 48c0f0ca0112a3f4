"""Directed acyclic graphs, random graph models and recovery metrics.

Adjacency matrices use the ``A[parent, child]`` convention throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError


@dataclass(frozen=True)
class Dag:
    """A DAG over ``d`` nodes with a topological ``order``.

    Construct directly from an edge set (order is computed) or through
    :meth:`from_adjacency`.  Cyclic edge sets are rejected.
    """

    d: int
    edges: frozenset = frozenset()
    order: tuple = field(default=(), compare=False)
    names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        edges = frozenset((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        for a, b in edges:
            if not (0 <= a < self.d and 0 <= b < self.d) or a == b:
                raise ContractError(f"invalid edge {a}->{b} for d={self.d}")
        if self.names and len(self.names) != self.d:
            raise ContractError("names must have one entry per node")
        object.__setattr__(self, "names", tuple(self.names))
        order = tuple(self.order) if self.order else _topological_order(self.d, edges)
        if order is None:
            raise ContractError("edge set contains a directed cycle")
        if sorted(order) != list(range(self.d)):
            raise ContractError("order must be a permutation of the nodes")
        pos = np.empty(self.d, dtype=int)
        pos[list(order)] = np.arange(self.d)
        if any(pos[a] >= pos[b] for a, b in edges):
            raise ContractError("an edge violates the given order")
        object.__setattr__(self, "order", order)

    @classmethod
    def from_adjacency(cls, adj, names=()):
        adj = np.asarray(adj)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ContractError(f"adjacency must be square, got {adj.shape}")
        rows, cols = np.nonzero(adj)
        return cls(adj.shape[0], frozenset(zip(rows.tolist(), cols.tolist())), names=names)

    @classmethod
    def empty(cls, d, names=()):
        return cls(d, frozenset(), names=names)

    def adjacency(self):
        a = np.zeros((self.d, self.d), dtype=bool)
        for i, j in self.edges:
            a[i, j] = True
        return a

    def parents(self, j):
        return sorted(i for i, c in self.edges if c == j)

    def __len__(self):
        return len(self.edges)

    def permuted(self, perm):
        """Relabel so that old node ``perm[i]`` becomes node ``i``."""
        inv = np.argsort(perm)
        names = tuple(self.names[p] for p in perm) if self.names else ()
        return Dag(self.d, frozenset((int(inv[a]), int(inv[b])) for a, b in self.edges),
                   names=names)


@dataclass(frozen=True)
class Metrics:
    shd: int
    tpr: float
    predicted_edges: int
    reversed: int
    missing: int
    extra: int

    def as_dict(self):
        return {"shd": self.shd, "tpr": self.tpr, "predicted_edges": self.predicted_edges,
                "reversed": self.reversed, "missing": self.missing, "extra": self.extra}


def _topological_order(d, edges):
    children = [[] for _ in range(d)]
    indeg = [0] * d
    for a, b in edges:
        children[a].append(b)
        indeg[b] += 1
    ready = sorted(i for i in range(d) if indeg[i] == 0)
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for c in sorted(children[i]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return tuple(order) if len(order) == d else None


def is_dag(graph):
    """True iff the nonzero support of ``graph`` has no directed cycle.

    Iterative depth-first search with white/grey/black marking.  Self-loops
    count as cycles.
    """
    if isinstance(graph, Dag):
        return True
    adj = np.asarray(graph)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ContractError(f"adjacency must be square, got {adj.shape}")
    d = adj.shape[0]
    succ = [np.flatnonzero(adj[i]).tolist() for i in range(d)]
    color = [0] * d  # 0 white, 1 on stack, 2 done
    for root in range(d):
        if color[root]:
            continue
        color[root] = 1
        stack = [(root, iter(succ[root]))]
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
            elif color[nxt] == 1:
                return False
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
    return True


def sample_er(d, k, rng):
    """Erdős–Rényi DAG with ``k * d`` expected edges.

    A uniform random causal order is drawn first; every pair consistent
    with it is kept independently with probability ``min(1, 2k/(d-1))``.
    """
    if d < 2 or k < 0:
        raise ContractError("sample_er needs d >= 2 and k >= 0")
    p = min(1.0, 2.0 * k / (d - 1))
    order = rng.permutation(d)
    keep = np.triu(rng.random((d, d)) < p, k=1)
    i, j = np.nonzero(keep)
    edges = frozenset(zip(order[i].tolist(), order[j].tolist()))
    return Dag(d, edges, order=tuple(order.tolist()))


def sample_dag_with_edges(d, m, rng):
    """Uniform random order plus ``m`` distinct order-respecting edges."""
    pairs = d * (d - 1) // 2
    if not 0 <= m <= pairs:
        raise ContractError(f"cannot place {m} edges on {d} nodes")
    order = rng.permutation(d)
    iu, ju = np.triu_indices(d, k=1)
    pick = rng.choice(pairs, size=m, replace=False)
    edges = frozenset(zip(order[iu[pick]].tolist(), order[ju[pick]].tolist()))
    return Dag(d, edges, order=tuple(order.tolist()))


def shd(pred, truth):
    """Structural Hamming distance; a reversed edge costs 1."""
    if pred.d != truth.d:
        raise ContractError(f"node count mismatch: {pred.d} vs {truth.d}")
    p, t = pred.edges, truth.edges
    reversed_ = sum(1 for a, b in p if (a, b) not in t and (b, a) in t)
    extra = sum(1 for a, b in p if (a, b) not in t and (b, a) not in t)
    missing = sum(1 for a, b in t if (a, b) not in p and (b, a) not in p)
    correct = len(p & t)
    tpr = correct / len(t) if t else 1.0
    return Metrics(shd=reversed_ + missing + extra, tpr=tpr, predicted_edges=len(p),
                   reversed=reversed_, missing=missing, extra=extra)


# -- edge-list files ----------------------------------------------------------

NODES_DIRECTIVE = "# nodes:"


def write_edge_list(dag, path, names=None, header=()):
    """Write ``PARENT<TAB>CHILD`` lines; the node set goes in a comment."""
    names = list(names or dag.names or [str(i) for i in range(dag.d)])
    lines = [f"# {h}" for h in header]
    lines.append(NODES_DIRECTIVE + "\t" + "\t".join(names))
    for a, b in sorted(dag.edges, key=lambda e: (names[e[0]], names[e[1]])):
        lines.append(f"{names[a]}\t{names[b]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_edge_list(path):
    """Parse an edge-list file into ``(names, edges)`` with edges as name pairs.

    ``names`` is the declared node list if the file carries one, otherwise
    the nodes in order of first appearance.
    """
    declared, seen, edges = None, [], []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith(NODES_DIRECTIVE):
            declared = line[len(NODES_DIRECTIVE):].split()
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ParseError(f"expected PARENT<TAB>CHILD, got {raw!r}", line=lineno)
        a, b = (s.strip() for s in parts)
        edges.append((a, b))
        for n in (a, b):
            if n not in seen:
                seen.append(n)
    if declared is not None:
        unknown = [n for n in seen if n not in declared]
        if unknown:
            raise ParseError(f"edges mention undeclared nodes {unknown}")
        return declared, edges
    return seen, edges


def load_dag(path, names=None):
    """Read an edge-list file as a :class:`Dag` indexed by ``names``."""
    file_names, edges = read_edge_list(path)
    names = list(names) if names is not None else file_names
    index = {n: i for i, n in enumerate(names)}
    missing = sorted({n for e in edges for n in e} - index.keys())
    if missing:
        raise ContractError(f"edge list mentions nodes not in the node set: {missing}")
    return Dag(len(names), frozenset((index[a], index[b]) for a, b in edges), names=tuple(names))
