"""Barabási-Albert peer topologies.

A ``Topology`` is an undirected graph stored as sorted per-node adjacency
lists.  Generated graphs start from ``m`` isolated seed nodes; every later
node attaches to ``m`` distinct existing nodes picked from the list of all
previous edge endpoints, so the edge count is exactly ``m * (n - m)``.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path

from doublespend_gnn.errors import InvalidInputError, InvalidParametersError

DEFAULT_BA_M = 8


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected graph in compressed sparse row form.

    ``indices[indptr[v]:indptr[v + 1]]`` is the ascending neighbour list of ``v``.
    """

    node_count: int
    indptr: np.ndarray
    indices: np.ndarray
    ba_m: int = 0
    seed: int = 0

    def __post_init__(self):
        for arr in (self.indptr, self.indices):
            arr.flags.writeable = False

    @classmethod
    def from_lists(cls, lists: list[list[int]], ba_m: int = 0, seed: int = 0) -> "Topology":
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum([len(x) for x in lists], out=indptr[1:])
        indices = np.fromiter((v for x in lists for v in sorted(x)), dtype=np.int32,
                              count=int(indptr[-1]))
        return cls(len(lists), indptr, indices, ba_m, seed)

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[tuple[int, int]],
                   ba_m: int = 0, seed: int = 0) -> "Topology":
        """Build a topology from an edge list without validating it.

        Self-loops and repeated edges are kept as given so that
        :func:`validate_topology` can report them.
        """
        lists: list[list[int]] = [[] for _ in range(node_count)]
        for u, v in edges:
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise InvalidInputError(f"edge ({u}, {v}) out of range for {node_count} nodes")
            lists[u].append(v)
            if u != v:
                lists[v].append(u)
        return cls.from_lists(lists, ba_m, seed)

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (self.node_count == other.node_count and self.ba_m == other.ba_m
                and self.seed == other.seed and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def neighbor_lists(self) -> list[list[int]]:
        flat = self.indices.tolist()
        bounds = self.indptr.tolist()
        return [flat[bounds[v]:bounds[v + 1]] for v in range(self.node_count)]

    @property
    def adjacency(self) -> list[list[int]]:
        return self.neighbor_lists()

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def edge_count(self) -> int:
        rows = np.repeat(np.arange(self.node_count), self.degrees)
        return int((rows <= self.indices).sum())

    def edges(self) -> Iterator[tuple[int, int]]:
        """Yield each undirected edge once as ``(u, v)`` with ``u <= v``, in lexicographic order."""
        for u, nbrs in enumerate(self.neighbor_lists()):
            for v in nbrs:
                if u <= v:
                    yield u, v

    @cached_property
    def csr(self) -> sp.csr_matrix:
        """Unweighted adjacency matrix (entries count parallel edges)."""
        data = np.ones(len(self.indices), dtype=np.float64)
        mat = sp.csr_matrix((data, self.indices.astype(np.int64), self.indptr.copy()),
                            shape=(self.node_count, self.node_count))
        mat.sum_duplicates()
        return mat

    def is_connected(self) -> bool:
        if self.node_count == 0:
            return False
        ncomp, _ = connected_components(self.csr, directed=False)
        return ncomp == 1


def generate_ba(n: int, m: int = DEFAULT_BA_M, seed: int = 0) -> Topology:
    """Generate a Barabási-Albert graph with ``n`` nodes and ``m`` edges per new node.

    Deterministic for fixed ``(n, m, seed)``.
    """
    if m < 1 or n < 1 or n <= m:
        raise InvalidParametersError(f"generate_ba requires n > m >= 1, got n={n}, m={m}")
    rng = random.Random(seed)
    lists: list[list[int]] = [[] for _ in range(n)]
    endpoints: list[int] = []
    for new in range(m, n):
        targets: set[int] = set()
        while len(targets) < m:
            if endpoints:
                targets.add(endpoints[rng.randrange(len(endpoints))])
            else:
                targets.add(rng.randrange(new))
        for t in sorted(targets):
            lists[new].append(t)
            lists[t].append(new)
            endpoints.append(new)
            endpoints.append(t)
    return Topology.from_lists(lists, m, seed)


def validate_topology(t: Topology) -> list[str]:
    """Return the names of violated topology invariants; empty when valid."""
    problems: list[str] = []
    n = t.node_count
    if n < 1 or len(t.indptr) != n + 1:
        return ["node-count"]
    if t.indices.size and (t.indices.min() < 0 or t.indices.max() >= n):
        return ["out-of-range"]
    adjacency = t.neighbor_lists()
    if any(v in nbrs for v, nbrs in enumerate(adjacency)):
        problems.append("self-loop")
    if any(len(set(nbrs)) != len(nbrs) for nbrs in adjacency):
        problems.append("duplicate-neighbor")
    if any(nbrs != sorted(nbrs) for nbrs in adjacency):
        problems.append("unsorted")
    forward = Counter((u, v) for u, nbrs in enumerate(adjacency) for v in nbrs if u != v)
    if any(forward[(v, u)] != c for (u, v), c in forward.items()):
        problems.append("asymmetric")
    if not _bfs_connected(adjacency):
        problems.append("disconnected")
    if t.ba_m > 0 and t.edge_count != t.ba_m * (n - t.ba_m):
        problems.append("edge-count")
    return problems


def _bfs_connected(adjacency: list[list[int]]) -> bool:
    # Follows out-lists only, so it stays meaningful for asymmetric inputs.
    seen = [False] * len(adjacency)
    seen[0] = True
    queue = deque([0])
    reached = 1
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                reached += 1
                queue.append(v)
    return reached == len(adjacency)


@dataclass(frozen=True)
class DegreeStats:
    histogram: dict[int, int]
    min_degree: float
    max_degree: float
    mean_degree: float
    loglog_slope: float


def degree_stats(t: Topology, min_count: int = 5) -> DegreeStats:
    """Degree histogram plus the least-squares slope of log(count) against log(degree).

    Only degrees seen at least ``min_count`` times enter the fit; the slope is
    NaN when fewer than two such degrees exist.
    """
    degs = t.degrees
    hist = {int(d): int(c) for d, c in sorted(Counter(degs.tolist()).items())}
    fit = [(d, c) for d, c in hist.items() if c >= min_count and d > 0]
    if len(fit) >= 2:
        x = np.log([d for d, _ in fit])
        y = np.log([c for _, c in fit])
        slope = float(np.polyfit(x, y, 1)[0])
    else:
        slope = float("nan")
    return DegreeStats(hist, float(degs.min()), float(degs.max()), float(degs.mean()), slope)


def estimate_mean_path_length(t: Topology, sources: int = 8, seed: int = 0) -> float:
    """Average shortest-path length from a few random BFS sources."""
    rng = np.random.default_rng(seed)
    k = min(sources, t.node_count)
    src = np.sort(rng.choice(t.node_count, size=k, replace=False))
    dist = shortest_path(t.csr, directed=False, unweighted=True, indices=src)
    finite = dist[np.isfinite(dist) & (dist > 0)]
    return float(finite.mean()) if finite.size else 0.0


def write_topology(t: Topology, path: str | Path) -> None:
    """Write ``n m seed`` then one ``u v`` line per edge (u < v, lexicographic)."""
    Path(path).write_text(format_topology(t))


def format_topology(t: Topology) -> str:
    lines = [f"{t.node_count} {t.ba_m} {t.seed}"]
    lines.extend(f"{u} {v}" for u, v in t.edges())
    return "\n".join(lines) + "\n"


def parse_topology(text: str) -> Topology:
    rows = text.split("\n")
    try:
        n, m, seed = (int(x) for x in rows[0].split())
        edges = [tuple(int(x) for x in r.split()) for r in rows[1:] if r.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"malformed topology text: {exc}") from None
    if any(len(e) != 2 for e in edges):
        raise InvalidInputError("malformed topology text: edge lines need two integers")
    return Topology.from_edges(n, edges, m, seed)  # type: ignore[arg-type]


def read_topology(path: str | Path) -> Topology:
    return parse_topology(Path(path).read_text())
