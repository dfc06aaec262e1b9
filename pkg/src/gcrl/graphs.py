"""Grouped causal graphs: generators, identifiability checkers, JSON I/O.

A GroupedGraph partitions D variables into M contiguous groups. The weighted
adjacency matrix uses the convention adjacency[i, j] = lambda for an edge
i -> j (i is the parent). confounder_mask flags variables that are latent
confounders (never observed).

Three generator families are provided:

  gen_dag_sim1           acyclic, fully observed, heavier cross-group fan-in
                         for later groups
  gen_cyclic_confounded  cyclic, half of each group masked as confounders
  gen_grn_dag            acyclic gene-regulatory topology with signed
                         activation/repression weights and designated leaves

The checkers verify the structural conditions the estimator relies on:

  check_A1      per group: every variable has a cross-group neighbor and the
                stacked child/parent pattern matrix has full row rank after
                dropping all-zero rows
  check_C1      per group pair: all cross-group relations directed, every
                variable has a co-parent and a co-child, and both relation
                graphs are connected within each group
  check_C1_alt  weaker variant: co-parent or co-child for every variable and
                a connected union relation graph
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

GRAPH_FORMAT_VERSION = "gcarl-graph/1"

# singular values below this fraction of the largest are treated as zero
RANK_TOL = 1e-9


class GraphError(ValueError):
    """Invalid graph construction or generator preconditions."""


@dataclass
class GroupedGraph:
    dims: list[int]
    adjacency: np.ndarray
    confounder_mask: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.dims = [int(d) for d in self.dims]
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.confounder_mask = np.asarray(self.confounder_mask, dtype=bool)
        n = sum(self.dims)
        if any(d < 1 for d in self.dims):
            raise GraphError("every group needs at least one variable")
        if self.adjacency.shape != (n, n):
            raise GraphError(
                f"adjacency shape {self.adjacency.shape} != ({n}, {n})"
            )
        if not np.all(np.isfinite(self.adjacency)):
            raise GraphError("adjacency must be finite")
        if np.any(np.diag(self.adjacency) != 0.0):
            raise GraphError("self-loops are not allowed")
        if self.confounder_mask.shape != (n,):
            raise GraphError("confounder_mask must have one flag per variable")

    @property
    def M(self) -> int:
        return len(self.dims)

    @property
    def n_vars(self) -> int:
        return int(self.adjacency.shape[0])

    def group_slice(self, m: int) -> slice:
        start = sum(self.dims[:m])
        return slice(start, start + self.dims[m])

    def group_of(self) -> np.ndarray:
        out = np.empty(self.n_vars, dtype=int)
        for m in range(self.M):
            out[self.group_slice(m)] = m
        return out


def observable_subgraph(g: GroupedGraph) -> GroupedGraph:
    """Restrict the graph to observable variables, reindexing groups."""
    keep = ~g.confounder_mask
    dims = [int(keep[g.group_slice(m)].sum()) for m in range(g.M)]
    if any(d == 0 for d in dims):
        raise GraphError("a group lost all its variables under masking")
    sub = g.adjacency[np.ix_(keep, keep)]
    meta = dict(g.metadata)
    meta["restricted_to_observables"] = True
    return GroupedGraph(dims, sub, np.zeros(sum(dims), dtype=bool), meta)


def topological_order(g: GroupedGraph) -> list[int]:
    """Kahn's algorithm; raises GraphError if the graph has a cycle."""
    n = g.n_vars
    adj = g.adjacency != 0.0
    indeg = adj.sum(axis=0).astype(int)
    ready = [i for i in range(n) if indeg[i] == 0]
    order = []
    while ready:
        i = ready.pop()
        order.append(i)
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(int(j))
    if len(order) != n:
        raise GraphError("graph contains a directed cycle")
    return order


def is_dag(g: GroupedGraph) -> bool:
    try:
        topological_order(g)
        return True
    except GraphError:
        return False


# ---------------------------------------------------------------------------
# generators


def _fill_weights(
    topology: np.ndarray, rng: np.random.Generator, lo: float, hi: float
) -> np.ndarray:
    draw = rng.uniform(lo, hi, size=topology.shape)
    return np.where(topology, draw, 0.0)


def gen_dag_sim1(
    M: int, d: int, seed: int, weight_range: tuple[float, float] = (0.9, 1.0)
) -> GroupedGraph:
    """Acyclic grouped graph, fully observed.

    Within each group, every variable after the first gets one uniformly
    chosen earlier same-group parent; in the first group the count is two
    where two earlier variables exist. Across groups, for every pair m < m'
    the edge pattern is the union of two random bijections drawn disjoint
    (they never agree at a position), so every variable has exactly two
    children in each later group and exactly two parents in each earlier
    one, and the pattern blocks are generically full-rank; group-m variables
    accumulate 2m - 1 parents. Nonzero weights are uniform in weight_range,
    then each column is divided by the variable's total parent count, which
    roughly equalizes the latent variances downstream.
    """
    if M < 2:
        raise GraphError("need at least two groups")
    if d < 2:
        raise GraphError("need at least two variables per group")
    rng = np.random.default_rng(seed)
    D = M * d
    topo = np.zeros((D, D), dtype=bool)
    for m in range(M):
        start = m * d
        for k in range(1, d):
            n_par = min(2, k) if m == 0 else 1
            parents = rng.choice(k, size=n_par, replace=False)
            topo[start + parents, start + k] = True
    for m in range(M):
        for m2 in range(m + 1, M):
            src, dst = m * d, m2 * d
            first = rng.permutation(d)
            while True:
                second = rng.permutation(d)
                if not (second == first).any():
                    break
            for perm in (first, second):
                topo[src + np.arange(d), dst + perm] = True
    adj = _fill_weights(topo, rng, *weight_range)
    n_parents = (adj != 0.0).sum(axis=0)
    cols = n_parents > 0
    adj[:, cols] = adj[:, cols] / n_parents[cols]
    meta = {"generator": "dag_sim1", "seed": int(seed), "M": M, "d": d}
    return GroupedGraph([d] * M, adj, np.zeros(D, dtype=bool), meta)


def _alternating_mask(M: int, group_size: int) -> np.ndarray:
    """Even local indices are confounders, odd ones observable."""
    mask = np.zeros(M * group_size, dtype=bool)
    for m in range(M):
        for k in range(0, group_size, 2):
            mask[m * group_size + k] = True
    return mask


def _draw_children_with_observable(
    rng: np.random.Generator,
    source: int,
    candidates: np.ndarray,
    observable: np.ndarray,
    adj_topo: np.ndarray,
    max_tries: int = 1000,
) -> np.ndarray:
    """Draw 2 distinct children, at least one observable, never creating a
    2-cycle with an existing opposite edge."""
    usable = np.array([c for c in candidates if not adj_topo[c, source]])
    if usable.size < 2 or not observable[usable].any():
        raise GraphError("cannot satisfy the observable-child constraint")
    for _ in range(max_tries):
        pick = rng.choice(usable, size=2, replace=False)
        if observable[pick].any():
            return pick
    raise GraphError("observable-child rejection budget exhausted")


def gen_cyclic_confounded(M: int, d_obs: int, seed: int) -> GroupedGraph:
    """Cyclic grouped graph with half of each group masked as confounders.

    Each group holds 2 * d_obs variables; the ones at even local indices are
    latent confounders. Every variable gets one same-group parent (no
    ordering, so cycles occur) and, for every ordered group pair, two
    distinct children in the other group. Cross-group relations are kept
    directed, and after masking every variable retains at least one
    observable child and one observable parent in every other group (a
    repair pass adds single edges where the random draw left a gap).
    Weights are uniform in [0.9, 1] with no normalization.
    """
    if M < 2:
        raise GraphError("need at least two groups")
    if d_obs < 2:
        raise GraphError("need at least two observable variables per group")
    rng = np.random.default_rng(seed)
    gs = 2 * d_obs
    D = M * gs
    mask = _alternating_mask(M, gs)
    observable = ~mask
    topo = np.zeros((D, D), dtype=bool)
    groups = [np.arange(m * gs, (m + 1) * gs) for m in range(M)]

    for m in range(M):
        for a in groups[m]:
            others = groups[m][groups[m] != a]
            topo[rng.choice(others), a] = True

    for m in range(M):
        for m2 in range(M):
            if m2 == m:
                continue
            for a in groups[m]:
                pick = _draw_children_with_observable(
                    rng, a, groups[m2], observable, topo
                )
                topo[a, pick] = True

    # repair: every variable needs an observable parent from every other group
    for m in range(M):
        for m2 in range(M):
            if m2 == m:
                continue
            obs_src = groups[m][observable[groups[m]]]
            for b in groups[m2]:
                if topo[obs_src, b].any():
                    continue
                free = np.array(
                    [a for a in obs_src if not topo[a, b] and not topo[b, a]]
                )
                if free.size == 0:
                    raise GraphError("cannot repair the observable-parent constraint")
                topo[rng.choice(free), b] = True

    adj = _fill_weights(topo, rng, 0.9, 1.0)
    meta = {"generator": "cyclic_confounded", "seed": int(seed), "M": M, "d_obs": d_obs}
    return GroupedGraph([gs] * M, adj, mask, meta)


def grn_edge_signs(g: GroupedGraph, seed: int) -> np.ndarray:
    """Per-gene activation/repression assignment.

    For each variable, half of its parents (the extra one on odd counts)
    are activating (+1) and the rest repressing (-1). Returns a matrix with
    the sign on every edge position and zero elsewhere. Deterministic per
    seed.
    """
    rng = np.random.default_rng(seed)
    D = g.n_vars
    signs = np.zeros((D, D))
    for j in range(D):
        parents = np.flatnonzero(g.adjacency[:, j])
        k = parents.size
        if k == 0:
            continue
        order = rng.permutation(k)
        n_act = math.ceil(k / 2)
        signs[parents[order[:n_act]], j] = 1.0
        signs[parents[order[n_act:]], j] = -1.0
    return signs


def gen_grn_dag(
    M: int, d_obs: int, seed: int, magnitude: float = 0.25
) -> GroupedGraph:
    """Acyclic gene-regulatory topology with signed interaction weights.

    Groups hold 2 * d_obs genes with the alternating confounder mask.
    Within groups the wiring follows gen_dag_sim1; across groups each
    ordered pair m < m' follows the observable-child draw plus the
    observable-parent repair of gen_cyclic_confounded. The last gene of
    every group except the final one is a designated leaf: it sources no
    edges, and every gene of the final group picks one of those leaves as
    a child, so last-group genes have children too. All weights have the
    same magnitude; signs mark activation (+) versus repression (-), half
    and half per gene with the odd one activating.
    """
    if M < 2:
        raise GraphError("need at least two groups")
    if d_obs < 2:
        raise GraphError("need at least two observable genes per group")
    rng = np.random.default_rng(seed)
    gs = 2 * d_obs
    D = M * gs
    mask = _alternating_mask(M, gs)
    observable = ~mask
    groups = [np.arange(m * gs, (m + 1) * gs) for m in range(M)]
    leaves = np.array([groups[m][-1] for m in range(M - 1)])
    topo = np.zeros((D, D), dtype=bool)

    for m in range(M):
        start = m * gs
        for k in range(1, gs):
            n_par = min(2, k) if m == 0 else 1
            parents = rng.choice(k, size=n_par, replace=False)
            topo[start + parents, start + k] = True

    for m in range(M):
        for m2 in range(m + 1, M):
            for a in groups[m]:
                if a in leaves:
                    continue
                pick = _draw_children_with_observable(
                    rng, a, groups[m2], observable, topo
                )
                topo[a, pick] = True

    for m in range(M):
        for m2 in range(m + 1, M):
            obs_src = groups[m][observable[groups[m]] & ~np.isin(groups[m], leaves)]
            for b in groups[m2]:
                if topo[obs_src, b].any():
                    continue
                free = np.array([a for a in obs_src if not topo[a, b]])
                if free.size == 0:
                    raise GraphError("cannot repair the observable-parent constraint")
                topo[rng.choice(free), b] = True

    # final-group genes feed the designated leaves
    for a in groups[M - 1]:
        topo[a, rng.choice(leaves)] = True
    for leaf in leaves:
        last_obs = groups[M - 1][observable[groups[M - 1]]]
        if not topo[last_obs, leaf].any():
            topo[rng.choice(last_obs), leaf] = True

    adj = np.where(topo, magnitude, 0.0)
    g = GroupedGraph(
        [gs] * M,
        adj,
        mask,
        {"generator": "grn_dag", "seed": int(seed), "M": M, "d_obs": d_obs},
    )
    g.adjacency = magnitude * grn_edge_signs(g, seed)
    return g


# ---------------------------------------------------------------------------
# checkers


@dataclass
class GroupA1:
    has_neighbors: bool
    full_row_rank: bool
    n_rows: int
    rank: int

    @property
    def passed(self) -> bool:
        return self.has_neighbors and self.full_row_rank


def check_A1(g: GroupedGraph) -> list[GroupA1]:
    """Per-group neighbor and rank condition.

    For group m, stack the cross-group child patterns (rows of the blocks
    L^{mm'}) on top of the cross-group parent patterns (rows of the
    transposed blocks L^{m'm}), excluding the within-group block. All-zero
    rows are dropped; the remainder must have full numeric row rank, and
    every variable must appear in at least one cross-group edge in either
    direction.
    """
    reports = []
    for m in range(g.M):
        rows = np.arange(g.n_vars)[g.group_slice(m)]
        others = np.array(
            [i for i in range(g.n_vars) if i not in set(rows.tolist())], dtype=int
        )
        upper = g.adjacency[np.ix_(rows, others)]
        lower = g.adjacency[np.ix_(others, rows)].T
        has_nb = bool(np.all((upper != 0).any(axis=1) | (lower != 0).any(axis=1)))
        stacked = np.vstack([upper, lower])
        nonzero = (stacked != 0).any(axis=1)
        reduced = stacked[nonzero]
        if reduced.size == 0:
            reports.append(GroupA1(has_nb, True, 0, 0))
            continue
        sv = np.linalg.svd(reduced, compute_uv=False)
        rank = int(np.sum(sv > RANK_TOL * sv[0]))
        reports.append(
            GroupA1(has_nb, rank == reduced.shape[0], int(reduced.shape[0]), rank)
        )
    return reports


def _pair_directed(g: GroupedGraph, m1: int, m2: int) -> bool:
    a = g.adjacency[g.group_slice(m1), g.group_slice(m2)]
    b = g.adjacency[g.group_slice(m2), g.group_slice(m1)]
    return not np.any((a != 0) & (b.T != 0))


def _corelations(g: GroupedGraph, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean co-parent and co-child relation graphs within group m.

    Two same-group variables are co-parents if they share a child in some
    other group, co-children if they share a parent in some other group.
    """
    rows = np.arange(g.n_vars)[g.group_slice(m)]
    others = np.array(
        [i for i in range(g.n_vars) if i not in set(rows.tolist())], dtype=int
    )
    child_pat = g.adjacency[np.ix_(rows, others)] != 0
    parent_pat = g.adjacency[np.ix_(others, rows)].T != 0
    co_parent = child_pat @ child_pat.T
    co_child = parent_pat @ parent_pat.T
    np.fill_diagonal(co_parent, False)
    np.fill_diagonal(co_child, False)
    return co_parent, co_child


def _connected(rel: np.ndarray) -> bool:
    n = rel.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(rel[i]):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def check_C1(g: GroupedGraph, m1: int, m2: int) -> bool:
    """Strong per-pair condition: directed cross-group relations; in both
    groups every variable has a co-parent and a co-child, and the co-parent
    and co-child relation graphs are each connected."""
    if not _pair_directed(g, m1, m2):
        return False
    for m in (m1, m2):
        co_parent, co_child = _corelations(g, m)
        if not co_parent.any(axis=1).all() or not co_child.any(axis=1).all():
            return False
        if not _connected(co_parent) or not _connected(co_child):
            return False
    return True


def check_C1_alt(g: GroupedGraph, m1: int, m2: int) -> bool:
    """Weaker variant: every variable has a co-parent or a co-child and the
    union relation graph is connected, in both groups."""
    if not _pair_directed(g, m1, m2):
        return False
    for m in (m1, m2):
        co_parent, co_child = _corelations(g, m)
        union = co_parent | co_child
        if not union.any(axis=1).all():
            return False
        if not _connected(union):
            return False
    return True


# ---------------------------------------------------------------------------
# small demonstration graphs for the checker semantics


def _from_edges(dims: list[int], edges: list[tuple[int, int]]) -> GroupedGraph:
    D = sum(dims)
    adj = np.zeros((D, D))
    for i, j in edges:
        adj[i, j] = 1.0
    return GroupedGraph(dims, adj, np.zeros(D, dtype=bool), {"generator": "demo"})


def demo_graph_no_corelations() -> GroupedGraph:
    """Variables exist without any co-parent or co-child; both checkers fail."""
    return _from_edges([4, 2], [(4, 0), (4, 1), (2, 5), (3, 5)])


def demo_graph_full_corelations() -> GroupedGraph:
    """Every variable has both co-relations and both relation graphs are
    connected in both groups; the strong and weak checkers both pass."""
    edges = [
        (0, 4), (1, 4), (1, 5), (2, 5), (2, 6), (3, 6), (3, 7), (0, 7),
        (5, 0), (5, 3), (6, 0), (6, 1), (4, 2), (4, 3), (7, 1),
    ]
    return _from_edges([4, 4], edges)


def demo_graph_partial_corelations(variant: int) -> GroupedGraph:
    """Three graphs where the strong checker fails but the weak one passes."""
    if variant == 0:
        edges = [(0, 4), (1, 4), (1, 5), (2, 5), (2, 6), (3, 6), (3, 7), (0, 7)]
        return _from_edges([4, 4], edges)
    if variant == 1:
        edges = [(5, 0), (5, 3), (6, 0), (6, 1), (4, 2), (4, 3), (7, 1)]
        return _from_edges([4, 4], edges)
    if variant == 2:
        edges = [(0, 3), (1, 3), (0, 4), (4, 1), (4, 2), (5, 2)]
        return _from_edges([3, 3], edges)
    raise GraphError("variant must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# JSON I/O


def to_json(g: GroupedGraph) -> str:
    doc = {
        "version": GRAPH_FORMAT_VERSION,
        "M": g.M,
        "dims": list(g.dims),
        "adjacency": [float(v) for v in g.adjacency.ravel()],
        "confounder_mask": [bool(v) for v in g.confounder_mask],
        "metadata": g.metadata,
    }
    return json.dumps(doc, sort_keys=True)


def from_json(doc: str) -> GroupedGraph:
    data = json.loads(doc)
    if data.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph format {data.get('version')!r}")
    dims = [int(d) for d in data["dims"]]
    D = sum(dims)
    adj = np.asarray(data["adjacency"], dtype=np.float64).reshape(D, D)
    mask = np.asarray(data["confounder_mask"], dtype=bool)
    g = GroupedGraph(dims, adj, mask, dict(data.get("metadata", {})))
    if g.M != int(data["M"]):
        raise GraphError("group count does not match dims")
    return g
