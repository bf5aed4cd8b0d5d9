"""Per-round communication graphs.

Two randomized samplers drive Epidemic Learning:

- EL-Oracle: an undirected s-regular graph, redrawn every round, in which
  every node's neighbor set is a uniformly random s-subset of the others.
- EL-Local: every node independently picks s distinct uniform targets,
  giving a directed s-out graph.

Static baselines (ring, torus, fully connected, one fixed random regular
graph) are built once per run.

The ``*_batch`` samplers return many draws at once as an integer array of
shape ``(size, n, s)`` holding out-neighbor ids. The single-graph functions
are thin wrappers over them, so Monte Carlo code that needs 1e5 draws runs
the exact same sampling logic as the simulator.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidDegree, InvalidSize, OutOfRange

__all__ = [
    "TopologyKind",
    "RoundGraph",
    "sample_regular_batch",
    "sample_s_out_batch",
    "sample_regular_random",
    "sample_s_out",
    "build_static",
    "in_neighbors",
    "validate_kind",
]


class TopologyKind(str, Enum):
    EL_ORACLE = "el-oracle"
    EL_LOCAL = "el-local"
    RING = "ring"
    TORUS = "torus"
    FULLY_CONNECTED = "fully-connected"
    STATIC_REGULAR = "static-regular"

    @property
    def is_epidemic(self) -> bool:
        return self in (TopologyKind.EL_ORACLE, TopologyKind.EL_LOCAL)

    @property
    def directed(self) -> bool:
        return self is TopologyKind.EL_LOCAL

    @classmethod
    def parse(cls, value: "str | TopologyKind") -> "TopologyKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "eloracle": cls.EL_ORACLE,
            "ellocal": cls.EL_LOCAL,
            "fullyconnected": cls.FULLY_CONNECTED,
            "complete": cls.FULLY_CONNECTED,
            "staticregular": cls.STATIC_REGULAR,
            "regular": cls.STATIC_REGULAR,
        }
        try:
            return cls(key)
        except ValueError:
            pass
        if key.replace("-", "") in aliases:
            return aliases[key.replace("-", "")]
        raise ValueError(f"unknown topology kind {value!r}")


@dataclass(frozen=True)
class RoundGraph:
    """One round's communication graph.

    Attributes:
        n: Number of nodes.
        directed: If False, ``out_adj`` is symmetric.
        out_adj: ``out_adj[i]`` lists the nodes ``i`` sends its model to.
        round: Round index this graph was drawn for (-1 for static graphs).
    """

    n: int
    directed: bool
    out_adj: tuple[tuple[int, ...], ...]
    round: int = -1

    def __post_init__(self) -> None:
        if self.n < 2:
            raise InvalidSize(f"a graph needs n >= 2 nodes, got {self.n}")
        if len(self.out_adj) != self.n:
            raise InvalidSize(f"out_adj has {len(self.out_adj)} rows for n={self.n}")
        for i, row in enumerate(self.out_adj):
            if len(set(row)) != len(row):
                raise ValueError(f"duplicate neighbor in row {i}: {row}")
            for j in row:
                if not 0 <= j < self.n:
                    raise OutOfRange(f"neighbor id {j} of node {i} outside [0, {self.n})")
                if j == i:
                    raise ValueError(f"self-loop at node {i}")
        if not self.directed:
            edges = {(i, j) for i, row in enumerate(self.out_adj) for j in row}
            for i, j in edges:
                if (j, i) not in edges:
                    raise ValueError(f"undirected graph is not symmetric at ({i}, {j})")

    @classmethod
    def from_lists(
        cls, out_adj: Iterable[Iterable[int]], directed: bool, round: int = -1
    ) -> "RoundGraph":
        rows = tuple(tuple(int(j) for j in row) for row in out_adj)
        return cls(n=len(rows), directed=directed, out_adj=rows, round=round)

    def out_degrees(self) -> list[int]:
        return [len(row) for row in self.out_adj]

    def in_adj(self) -> list[list[int]]:
        """In-neighbor lists for every node, each sorted by sender id."""
        if not self.directed:
            return [sorted(row) for row in self.out_adj]
        incoming: list[list[int]] = [[] for _ in range(self.n)]
        for j, row in enumerate(self.out_adj):
            for i in row:
                incoming[i].append(j)
        return incoming

    def in_degrees(self) -> list[int]:
        return [len(row) for row in self.in_adj()]

    def edge_count(self) -> int:
        """Number of directed sends (each undirected edge counts twice)."""
        return sum(len(row) for row in self.out_adj)

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, row in enumerate(self.out_adj):
            a[i, list(row)] = 1.0
        return a

    def is_connected(self) -> bool:
        """Weak connectivity by BFS over the union of in- and out-edges."""
        nbrs: list[set[int]] = [set(row) for row in self.out_adj]
        for i, row in enumerate(self.out_adj):
            for j in row:
                nbrs[j].add(i)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in nbrs[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return len(seen) == self.n


def _check_sample_size(n: int, s: int) -> None:
    if n < 2:
        raise InvalidSize(f"need n >= 2 nodes, got {n}")
    if not 1 <= s <= n - 1:
        raise InvalidDegree(f"sample size s={s} outside [1, {n - 1}] for n={n}")


def _circulant_offsets(n: int, s: int) -> np.ndarray:
    offsets = [k for k in range(1, s // 2 + 1)] + [n - k for k in range(1, s // 2 + 1)]
    if s % 2:
        offsets.append(n // 2)
    return np.asarray(offsets, dtype=np.int64)


def sample_regular_batch(n: int, s: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` independent EL-Oracle graphs.

    Each draw relabels a fixed s-regular circulant graph by a uniform random
    permutation. The circulant is vertex-transitive, so every node's
    neighbor set is a uniform s-subset of the other nodes.

    Returns:
        Integer array ``(size, n, s)``; row ``[b, i]`` holds node i's
        neighbors in draw b.
    """
    _check_sample_size(n, s)
    if (n * s) % 2:
        raise InvalidDegree(f"no {s}-regular graph on {n} nodes: n*s must be even")
    offsets = _circulant_offsets(n, s)
    # perm[b, p] is the node placed at circulant position p
    perm = rng.permuted(np.tile(np.arange(n, dtype=np.int64), (size, 1)), axis=1)
    positions = (np.arange(n)[:, None] + offsets[None, :]) % n
    nbr_by_position = perm[:, positions]
    out = np.empty((size, n, s), dtype=np.int64)
    out[np.arange(size)[:, None], perm] = nbr_by_position
    return out


def sample_s_out_batch(n: int, s: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` independent EL-Local graphs.

    Every (draw, node) pair gets s distinct targets chosen uniformly from the
    n - 1 other nodes, via Floyd's subset algorithm run in lockstep across
    all pairs. Values drawn from ``[0, n-1)`` are shifted past the node's own
    id, which removes self-loops without rejection.

    Returns:
        Integer array ``(size, n, s)`` of out-neighbor ids.
    """
    _check_sample_size(n, s)
    m = n - 1
    columns: list[np.ndarray] = []
    for j in range(m - s, m):
        t = rng.integers(0, j + 1, size=(size, n))
        taken = np.zeros((size, n), dtype=bool)
        for col in columns:
            taken |= col == t
        columns.append(np.where(taken, j, t))
    chosen = np.stack(columns, axis=2)
    own = np.arange(n, dtype=np.int64)[None, :, None]
    return chosen + (chosen >= own)


def _graph_from_rows(rows: np.ndarray, directed: bool, round: int) -> RoundGraph:
    return RoundGraph.from_lists((sorted(r) for r in rows.tolist()), directed=directed, round=round)


def sample_regular_random(
    n: int, s: int, rng: np.random.Generator, round: int = -1
) -> RoundGraph:
    """One EL-Oracle round graph: undirected, every node of degree exactly s."""
    return _graph_from_rows(sample_regular_batch(n, s, 1, rng)[0], directed=False, round=round)


def sample_s_out(n: int, s: int, rng: np.random.Generator, round: int = -1) -> RoundGraph:
    """One EL-Local round graph: directed, every node of out-degree exactly s."""
    return _graph_from_rows(sample_s_out_batch(n, s, 1, rng)[0], directed=True, round=round)


def validate_kind(kind: TopologyKind, n: int, s: int | None) -> None:
    """Raise if (kind, n, s) violates the kind's size/degree constraints."""
    kind = TopologyKind.parse(kind)
    if n < 2:
        raise InvalidSize(f"need n >= 2 nodes, got {n}")
    if kind is TopologyKind.RING:
        if n < 3:
            raise InvalidSize(f"ring needs n >= 3, got {n}")
    elif kind is TopologyKind.TORUS:
        side = math.isqrt(n)
        if side * side != n or side < 3:
            raise InvalidSize(f"torus needs n a perfect square >= 9, got {n}")
    elif kind is TopologyKind.FULLY_CONNECTED:
        pass
    else:
        if s is None:
            raise InvalidDegree(f"{kind.value} needs a sample size s")
        _check_sample_size(n, s)
        if kind in (TopologyKind.EL_ORACLE, TopologyKind.STATIC_REGULAR) and (n * s) % 2:
            raise InvalidDegree(f"no {s}-regular graph on {n} nodes: n*s must be even")


def build_static(
    kind: TopologyKind, n: int, s: int | None = None, rng: np.random.Generator | None = None
) -> RoundGraph:
    """Build the fixed graph of a static baseline topology."""
    kind = TopologyKind.parse(kind)
    if kind.is_epidemic:
        raise ValueError(f"{kind.value} is not a static topology")
    validate_kind(kind, n, s)
    if kind is TopologyKind.RING:
        rows = [[(i - 1) % n, (i + 1) % n] for i in range(n)]
    elif kind is TopologyKind.TORUS:
        side = math.isqrt(n)
        rows = []
        for i in range(n):
            r, c = divmod(i, side)
            rows.append(
                [
                    ((r - 1) % side) * side + c,
                    ((r + 1) % side) * side + c,
                    r * side + (c - 1) % side,
                    r * side + (c + 1) % side,
                ]
            )
    elif kind is TopologyKind.FULLY_CONNECTED:
        rows = [[j for j in range(n) if j != i] for i in range(n)]
    else:
        if rng is None:
            raise ValueError("static-regular needs an rng")
        return sample_regular_random(n, s, rng)
    return RoundGraph.from_lists((sorted(r) for r in rows), directed=False)


def in_neighbors(graph: RoundGraph, i: int) -> set[int]:
    """Nodes whose models reach node ``i`` in this graph."""
    if not 0 <= i < graph.n:
        raise OutOfRange(f"node id {i} outside [0, {graph.n})")
    if not graph.directed:
        return set(graph.out_adj[i])
    return {j for j, row in enumerate(graph.out_adj) if i in row}

