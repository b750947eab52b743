"""Finite-graph Markov chains: graph validation, stationary vectors, time
reversal, trajectory sampling, and cylinder probabilities.

Vertices are referred to by name at the API surface and by index internally.
All chains are validated for connectivity and aperiodicity before any
sampling is allowed, since downstream estimators assume a mixing shift.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AsymmetricEdgeSet,
    EmptyGraph,
    NoConvergence,
    UnknownVertex,
    ValidationError,
)

Edge = tuple[str, str]

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class GraphSpec:
    """A finite directed graph with a symmetric edge set."""

    vertices: tuple[str, ...]
    edges: frozenset[Edge]

    @classmethod
    def make(cls, vertices, edges) -> "GraphSpec":
        return cls(tuple(vertices), frozenset((str(u), str(v)) for u, v in edges))

    def neighbors(self, v: str) -> list[str]:
        order = {name: i for i, name in enumerate(self.vertices)}
        out = [w for (u, w) in self.edges if u == v]
        return sorted(out, key=order.__getitem__)


@dataclass(frozen=True)
class GraphDiagnostics:
    connected: bool
    loop_gcd: int


def validate_graph(spec: GraphSpec) -> GraphDiagnostics:
    """Check symmetry, connectivity, and the gcd of closed-loop lengths.

    The gcd is computed at the first vertex via breadth-first levels: for a
    connected symmetric graph, gcd over edges (u, v) of level(u) + 1 - level(v)
    equals the gcd of all closed-loop lengths through any fixed vertex.
    """
    if len(spec.vertices) == 0:
        raise EmptyGraph("graph has no vertices")
    if len(set(spec.vertices)) != len(spec.vertices):
        raise ValidationError("duplicate vertex names in graph")
    names = set(spec.vertices)
    for (u, v) in spec.edges:
        if u not in names or v not in names:
            raise UnknownVertex(f"edge ({u}, {v}) mentions an unknown vertex")
        if (v, u) not in spec.edges:
            raise AsymmetricEdgeSet(f"edge ({u}, {v}) has no reverse edge ({v}, {u})")

    adj: dict[str, list[str]] = {v: [] for v in spec.vertices}
    for (u, v) in spec.edges:
        adj[u].append(v)

    root = spec.vertices[0]
    level = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in level:
                level[w] = level[u] + 1
                queue.append(w)
    connected = len(level) == len(spec.vertices)

    g = 0
    for (u, v) in spec.edges:
        if u in level and v in level:
            g = math.gcd(g, abs(level[u] + 1 - level[v]))
    return GraphDiagnostics(connected=connected, loop_gcd=g)


def stationary_vector(kernel: np.ndarray, residual: float = 1e-12,
                      max_iter: int = 10 ** 6) -> np.ndarray:
    """Stationary row vector of a row-stochastic kernel, by power iteration."""
    p = np.asarray(kernel, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValidationError("kernel must be a square matrix")
    if np.any(p < 0):
        raise ValidationError("kernel has negative entries")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ValidationError("kernel rows do not sum to 1 within 1e-12")

    pi = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(max_iter):
        nxt = pi @ p
        nxt /= nxt.sum()
        if np.max(np.abs(nxt @ p - nxt)) <= residual:
            if np.any(nxt <= 0):
                raise ValidationError("stationary vector is not strictly positive")
            return nxt
        pi = nxt
    raise NoConvergence(
        f"power iteration did not reach residual {residual} in {max_iter} iterations"
    )


def reverse_kernel(kernel: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Time-reversed kernel: entry (v, u) is pi(u) * p(u, v) / pi(v)."""
    p = np.asarray(kernel, dtype=float)
    pi = np.asarray(pi, dtype=float)
    return (pi[:, None] * p).T / pi[:, None]


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Validated chain: kernel, stationary vector, and its time reversal.

    Immutable after construction; safe to share across threads.  All
    randomness is supplied by the caller through seeded generators.
    """

    graph: GraphSpec
    kernel: np.ndarray
    stationary: np.ndarray
    reversed_kernel: np.ndarray
    reversed_stationary: np.ndarray
    vertex_index: dict[str, int] = field(repr=False)
    _cum_rows: tuple[tuple[float, ...], ...] = field(repr=False)
    _cum_rows_rev: tuple[tuple[float, ...], ...] = field(repr=False)
    _cum_stationary: tuple[float, ...] = field(repr=False)
    _edge_mask: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, graph: GraphSpec, kernel, residual: float = 1e-12,
              max_iter: int = 10 ** 6) -> "MarkovChain":
        diag = validate_graph(graph)
        if not diag.connected:
            raise ValidationError("graph is not connected; chain construction refused")
        if diag.loop_gcd != 1:
            raise ValidationError(
                f"graph is periodic (loop gcd {diag.loop_gcd}); chain construction refused"
            )
        p = np.array(kernel, dtype=float)
        n = len(graph.vertices)
        if p.shape != (n, n):
            raise ValidationError(f"kernel shape {p.shape} does not match {n} vertices")
        if np.any(p < 0):
            raise ValidationError("kernel has negative entries")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValidationError("kernel rows do not sum to 1 within 1e-12")
        index = {v: i for i, v in enumerate(graph.vertices)}
        mask = np.zeros((n, n), dtype=bool)
        for (u, v) in graph.edges:
            mask[index[u], index[v]] = True
        bad = np.argwhere((p > 0) != mask)
        if bad.size:
            i, j = bad[0]
            u, v = graph.vertices[i], graph.vertices[j]
            raise ValidationError(
                f"kernel support does not match edge set at ({u}, {v}): "
                f"p={p[i, j]}, edge={'present' if mask[i, j] else 'absent'}"
            )
        pi = stationary_vector(p, residual=residual, max_iter=max_iter)
        if np.max(np.abs(pi @ p - pi)) > STATIONARY_TOL:
            raise NoConvergence("stationary residual exceeds 1e-10 after iteration")
        rk = reverse_kernel(p, pi)
        p.setflags(write=False)
        pi.setflags(write=False)
        rk.setflags(write=False)
        return cls(
            graph=graph,
            kernel=p,
            stationary=pi,
            reversed_kernel=rk,
            reversed_stationary=pi,
            vertex_index=index,
            _cum_rows=tuple(tuple(np.cumsum(row)) for row in p),
            _cum_rows_rev=tuple(tuple(np.cumsum(row)) for row in rk),
            _cum_stationary=tuple(np.cumsum(pi)),
            _edge_mask=mask,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.graph.vertices)

    def index(self, name: str) -> int:
        try:
            return self.vertex_index[name]
        except KeyError:
            raise UnknownVertex(f"vertex {name!r} is not in the graph") from None

    def name(self, i: int) -> str:
        return self.graph.vertices[i]

    def cum_rows(self, reversed_time: bool = False):
        return self._cum_rows_rev if reversed_time else self._cum_rows


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A finite vertex path; every consecutive pair is an edge."""

    indices: np.ndarray
    vertex_names: tuple[str, ...]

    @classmethod
    def from_names(cls, chain: MarkovChain, names) -> "Trajectory":
        idx = np.array([chain.index(v) for v in names], dtype=np.int64)
        if idx.size == 0:
            raise ValidationError("a trajectory needs at least one vertex")
        if idx.size > 1 and not chain._edge_mask[idx[:-1], idx[1:]].all():
            k = int(np.argmin(chain._edge_mask[idx[:-1], idx[1:]]))
            raise ValidationError(
                f"consecutive pair ({names[k]}, {names[k + 1]}) is not an edge"
            )
        return cls(indices=idx, vertex_names=chain.graph.vertices)

    @property
    def vertices(self) -> tuple[str, ...]:
        return tuple(self.vertex_names[i] for i in self.indices)

    def __len__(self) -> int:
        """Number of steps (edges), one less than the number of vertices."""
        return len(self.indices) - 1

    def step_pairs(self) -> np.ndarray:
        return np.stack([self.indices[:-1], self.indices[1:]], axis=1)


def _draw(cum_row, u: float) -> int:
    """Categorical draw shared by the scalar and the batched samplers."""
    return min(bisect_right(cum_row, u), len(cum_row) - 1)


def sample_trajectory(chain: MarkovChain, start, length: int,
                      rng: np.random.Generator,
                      reversed_time: bool = False) -> Trajectory:
    """Sample length steps of the chain; start is a vertex name or None for pi.

    Always consumes length + 1 uniforms from rng (the first is spent on the
    initial vertex only when start is None), so identical seeds give identical
    trajectories regardless of the start spec.
    """
    if length < 0:
        raise ValidationError("trajectory length must be >= 0")
    u = rng.random(length + 1)
    if start is None:
        cur = _draw(chain._cum_stationary, u[0])
    else:
        cur = chain.index(start)
    rows = chain.cum_rows(reversed_time)
    out = np.empty(length + 1, dtype=np.int64)
    out[0] = cur
    for t in range(length):
        cur = _draw(rows[cur], u[t + 1])
        out[t + 1] = cur
    return Trajectory(indices=out, vertex_names=chain.graph.vertices)


def cylinder_probability(chain: MarkovChain, word) -> float:
    """Markov measure of the cylinder fixing the given vertex word."""
    word = list(word)
    if not word:
        raise ValidationError("cylinder word must be non-empty")
    idx = [chain.index(v) for v in word]
    prob = float(chain.stationary[idx[0]])
    for a, b in zip(idx[:-1], idx[1:]):
        prob *= float(chain.kernel[a, b])
        if prob == 0.0:
            return 0.0
    return prob
