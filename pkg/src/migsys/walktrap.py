"""Random-walk agglomerative community detection on aggregated flow matrices.

The graph is undirected and weighted. Vertex i is described by its t-step
transition row P^t[i, :] with P the row-normalized weight matrix, and two
profiles are compared with the degree-weighted distance

    r(i, j)^2 = sum_k (P^t[i, k] - P^t[j, k])^2 / d_k .

Communities start as singletons; adjacent pairs are merged greedily by the
smallest increase of the Ward-style criterion

    delta(C1, C2) = |C1| |C2| / (|C1| + |C2|) * r(C1, C2)^2 / n ,

where a community's profile is the size-weighted mean of its members'.
Weighted modularity is recorded after every merge and the best level is
the output partition.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .community import Partition
from .io import NodeRegistry, PeriodAxis, build_tensor

_TIE = 1e-12


@dataclass
class WeightedGraph:
    """Symmetric nonnegative weights with a zero diagonal."""

    weights: np.ndarray
    ids: list | None = None

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError(f"weight matrix must be square, got {W.shape}")
        if not np.all(np.isfinite(W)) or np.any(W < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.array_equal(W, W.T):
            raise ValueError("weight matrix must be symmetric")
        if np.any(np.diag(W) != 0):
            raise ValueError("weight matrix must have a zero diagonal")
        self.weights = W
        if self.ids is None:
            self.ids = [str(i) for i in range(W.shape[0])]
        elif isinstance(self.ids, NodeRegistry):
            self.ids = list(self.ids.ids)
        if len(self.ids) != W.shape[0]:
            raise ValueError("one id per node required")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass
class Dendrogram:
    graph: WeightedGraph
    merges: list = field(default_factory=list)       # (u, v, delta); new id = n + index
    levels: list = field(default_factory=list)       # label arrays, level 0 = singletons
    modularity: list = field(default_factory=list)   # one per level

    def n_communities(self, level: int) -> int:
        return int(len(np.unique(self.levels[level])))


def symmetrize(W, ids=None) -> WeightedGraph:
    """W + W^T with the diagonal zeroed."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {W.shape}")
    if np.any(W < 0):
        raise ValueError("flow matrix must be nonnegative")
    S = W + W.T
    np.fill_diagonal(S, 0.0)
    return WeightedGraph(S, ids)


def modularity(graph: WeightedGraph, labels) -> float:
    """Weighted modularity sum_c [ w_in(c) / w - (d(c) / 2w)^2 ].

    w is the total edge weight (each edge once), w_in(c) the weight inside
    c and d(c) its total degree. An edgeless graph scores 0.
    """
    labels = np.asarray(labels)
    W = graph.weights
    two_w = W.sum()
    if two_w == 0:
        return 0.0
    q = 0.0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        inside = W[np.ix_(idx, idx)].sum()        # counts each edge twice
        deg = W[idx].sum()
        q += inside / two_w - (deg / two_w) ** 2
    return float(q)


def _canonical(labels) -> np.ndarray:
    # Relabel 0.. by first appearance in node order.
    seen = {}
    return np.array([seen.setdefault(l, len(seen)) for l in labels], dtype=int)


def _walk(graph: WeightedGraph, t: int, loops: bool):
    # t-step transition rows and inverse degrees of the (looped) walk graph.
    if t < 1:
        raise ValueError("walk length t must be >= 1")
    W = graph.weights
    n = graph.n
    if loops and n:
        n_edges = np.count_nonzero(W, axis=1)
        mean_w = np.divide(W.sum(axis=1), n_edges, out=np.zeros(n), where=n_edges > 0)
        W = W + np.diag(mean_w)
    d = W.sum(axis=1)
    live = d > 0
    P = np.zeros_like(W)
    P[live] = W[live] / d[live, None]
    inv_d = np.zeros(n)
    inv_d[live] = 1.0 / d[live]
    return np.linalg.matrix_power(P, t), inv_d


def walk_distances(graph: WeightedGraph, t: int = 4, loops: bool = True) -> np.ndarray:
    """Matrix of vertex distances r(i, j)."""
    Pt, inv_d = _walk(graph, t, loops)
    diff = Pt[:, None, :] - Pt[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk,k->ij", diff, diff, inv_d))


def walktrap(graph: WeightedGraph, t: int = 4, loops: bool = True) -> Dendrogram:
    """Full merge history. Isolates stay singletons.

    With ``loops`` every non-isolated vertex gets a self-loop weighing its
    mean incident edge weight for the walk (not for modularity). Without
    them walks on bipartite pieces are periodic and a hub ends up far from
    its own leaves.
    """
    Pt, inv_d = _walk(graph, t, loops)
    W = graph.weights
    n = graph.n
    labels = np.arange(n)
    dendro = Dendrogram(graph)
    dendro.levels.append(_canonical(labels))
    dendro.modularity.append(modularity(graph, labels))
    if n == 0 or W.sum() == 0:
        return dendro

    profile = {i: Pt[i] for i in range(n)}
    size = {i: 1 for i in range(n)}
    members = {i: [i] for i in range(n)}
    nbrs = {i: set(np.flatnonzero(W[i] > 0).tolist()) for i in range(n)}

    def delta(u, v):
        diff = profile[u] - profile[v]
        r2 = float(np.sum(diff * diff * inv_d))
        return size[u] * size[v] / (size[u] + size[v]) * r2 / n

    heap = []
    for u in range(n):
        for v in nbrs[u]:
            if u < v:
                heap.append((delta(u, v), u, v))
    heapq.heapify(heap)

    next_id = n
    while heap:
        dv, u, v = heapq.heappop(heap)
        if u not in size or v not in size:
            continue                                   # stale entry
        new = next_id
        next_id += 1
        su, sv = size.pop(u), size.pop(v)
        profile[new] = (su * profile.pop(u) + sv * profile.pop(v)) / (su + sv)
        size[new] = su + sv
        members[new] = members.pop(u) + members.pop(v)
        nb = (nbrs.pop(u) | nbrs.pop(v)) - {u, v}
        for x in nb:
            nbrs[x] -= {u, v}
            nbrs[x].add(new)
        nbrs[new] = nb
        labels[members[new]] = new
        dendro.merges.append((u, v, dv))
        dendro.levels.append(_canonical(labels))
        dendro.modularity.append(modularity(graph, labels))
        for x in nb:
            heapq.heappush(heap, (delta(x, new), min(x, new), max(x, new)))
    return dendro


def best_partition(dendro: Dendrogram, side: str = "graph") -> Partition:
    """Level of maximal modularity; near-ties go to fewer communities."""
    if not dendro.levels:
        raise ValueError("empty dendrogram")
    q = np.asarray(dendro.modularity)
    best = q.max()
    level = max(i for i in range(len(q)) if q[i] >= best - _TIE)
    labels = dendro.levels[level]
    ids = dendro.graph.ids
    return Partition(side, {ids[i]: int(labels[i]) + 1 for i in range(len(ids))},
                     source_rank=int(labels.max()) + 1 if labels.size else 0,
                     modularity=float(q[level]))


@dataclass
class PrePostComparison:
    pre: Partition
    post: Partition
    table: list            # (node id, pre community, post community) in registry order
    focal: dict | None = None

    def __iter__(self):
        return iter((self.pre, self.post, self.table))


def _side_partition(W, ids, t, side):
    return best_partition(walktrap(symmetrize(W, ids), t), side)


def compare_pre_post(records, split_label, focal=None, t: int = 4,
                     registry: NodeRegistry | None = None,
                     periods: PeriodAxis | None = None) -> PrePostComparison:
    """Walktrap partitions of the flows summed before and after ``split_label``.

    The split period belongs to neither side. Both sides share one node
    universe, so nodes absent on one side are isolates there.
    """
    X, _, registry, periods = build_tensor(records, registry, periods)
    pos = periods.position(split_label)
    if pos == 0 or pos == len(periods) - 1:
        raise ValueError(f"split {split_label!r} leaves no periods on one side")
    W_pre = X[:, :, :pos].sum(axis=2)
    W_post = X[:, :, pos + 1:].sum(axis=2)
    ids = registry.ids
    with ThreadPoolExecutor(max_workers=2) as pool:
        f_pre = pool.submit(_side_partition, W_pre, ids, t, "pre")
        f_post = pool.submit(_side_partition, W_post, ids, t, "post")
        pre, post = f_pre.result(), f_post.result()
    table = [(n, pre.labels[n], post.labels[n]) for n in ids]
    info = None
    if focal is not None:
        focal = str(focal)
        if focal not in registry:
            raise ValueError(f"focal node {focal!r} not in the data")
        pre_members = pre.members(pre.labels[focal])
        post_members = post.members(post.labels[focal])
        info = {
            "node": focal,
            "pre_community": pre.labels[focal],
            "post_community": post.labels[focal],
            "pre_size": len(pre_members),
            "post_size": len(post_members),
            "size_ratio": len(post_members) / len(pre_members),
            "pre_members": pre_members,
            "post_members": post_members,
        }
    return PrePostComparison(pre, post, table, info)
