"""Concrete SL_d(R) geometry.

Cartan projection (log singular values), Iwasawa cocycle through
positive-diagonal QR, exterior powers as matrices of minors, full flags as
orthonormal frames, general-position pairings, the reverse-and-negate
involution, and an explicit a-valued Busemann function built from the
pairing determinants.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    NotInGeneralPosition,
    NumericalBreakdown,
    UnknownVertex,
    ValidationError,
)
from .markov_sft import GraphSpec, MarkovChain

Edge = tuple[str, str]

DET_TOL = 1e-9
ORTHO_TOL = 1e-8
GENERAL_POSITION_FLOOR = 1e-12


def _qr_pos(m: np.ndarray):
    """QR factorization normalized so R has a strictly positive diagonal."""
    q, r = np.linalg.qr(m)
    s = np.sign(np.diagonal(r)).copy()
    s[s == 0] = 1.0
    return q * s, r * s[:, None]


@dataclass(frozen=True, eq=False)
class Flag:
    """A full flag of nested subspaces, stored as an orthonormal frame.

    Column k of q spans the new direction of the k-th subspace; the k-th
    subspace itself is the span of the first k columns.
    """

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValidationError("flag frame must be a square matrix")
        if np.max(np.abs(q.T @ q - np.eye(q.shape[0]))) > ORTHO_TOL:
            raise ValidationError("flag frame is not orthonormal")
        object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @staticmethod
    def standard(d: int) -> "Flag":
        return Flag(np.eye(d))

    @staticmethod
    def from_matrix(m) -> "Flag":
        """Orthonormalize the columns of m (must be nonsingular)."""
        m = np.asarray(m, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("flag spec must be a square matrix")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValidationError("flag spec matrix is singular")
        q, _ = _qr_pos(m)
        return Flag(q)

    @staticmethod
    def random(d: int, rng: np.random.Generator) -> "Flag":
        return Flag.from_matrix(rng.standard_normal((d, d)))


def check_unimodular(g: np.ndarray, tol: float = DET_TOL) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValidationError("group element must be a square matrix")
    det = float(np.linalg.det(g))
    if abs(det - 1.0) > tol * max(1.0, float(np.abs(g).max()) ** g.shape[0]):
        raise ValidationError(f"matrix determinant {det} is not 1 within {tol}")
    return g


def cartan_kappa(g: np.ndarray) -> np.ndarray:
    """Vector of log singular values, nonincreasing; sums to ~0 on SL_d."""
    g = np.asarray(g, dtype=float)
    try:
        s = np.linalg.svd(g, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"SVD failed: {exc}") from exc
    if not np.all(np.isfinite(s)) or s[-1] <= 0.0:
        raise NumericalBreakdown("singular values collapsed or overflowed")
    return np.log(s)


def iwasawa_step(g: np.ndarray, xi: Flag):
    """One application of g to a flag: returns (sigma, transported flag).

    Factor g q = q' r with r upper triangular, positive diagonal; sigma is
    the log diagonal of r and the new flag frame is q'.
    """
    a = np.asarray(g, dtype=float) @ xi.q
    try:
        q, r = _qr_pos(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"QR failed: {exc}") from exc
    diag = np.diagonal(r)
    if not np.all(np.isfinite(diag)) or np.any(diag < 1e-300):
        raise NumericalBreakdown("QR diagonal underflowed")
    return np.log(diag), Flag(q)


def wedge_power(g: np.ndarray, k: int) -> np.ndarray:
    """Matrix of the k-th exterior power in the lexicographic wedge basis."""
    g = np.asarray(g, dtype=float)
    d = g.shape[0]
    if not 1 <= k <= d:
        raise ValidationError(f"wedge order {k} outside 1..{d}")
    if k == 1:
        return g.copy()
    combos = np.array(list(itertools.combinations(range(d), k)))
    sub = g[combos[:, None, :, None], combos[None, :, None, :]]
    return np.linalg.det(sub)


def opposition_iota(t: np.ndarray) -> np.ndarray:
    """Reverse-and-negate involution on the Cartan algebra."""
    return -np.asarray(t, dtype=float)[::-1].copy()


def general_position_delta(xi: Flag, eta: Flag):
    """Pairing determinants delta_k and their minimum.

    delta_k is the absolute determinant of the matrix formed by the first k
    columns of xi next to the first d-k columns of eta; it vanishes exactly
    when the corresponding subspaces fail to span.
    """
    d = xi.dim
    if eta.dim != d:
        raise ValidationError("flags have different dimensions")
    per_k = np.empty(d - 1)
    for k in range(1, d):
        block = np.concatenate([xi.q[:, :k], eta.q[:, : d - k]], axis=1)
        per_k[k - 1] = abs(np.linalg.det(block))
    return float(per_k.min()), per_k


def busemann_H(xi: Flag, eta: Flag) -> np.ndarray:
    """a-valued pairing depth: partial sums are -log of the pairing dets."""
    delta, per_k = general_position_delta(xi, eta)
    if delta <= GENERAL_POSITION_FLOOR:
        raise NotInGeneralPosition(f"pairing determinant {delta} below floor")
    chi = np.concatenate([[0.0], -np.log(per_k), [0.0]])
    return np.diff(chi)


def flag_distance(xi: Flag, eta: Flag) -> float:
    """Max over k of the Frobenius distance between subspace projectors."""
    c = xi.q.T @ eta.q
    t = np.cumsum(np.cumsum(c * c, axis=0), axis=1)
    d = xi.dim
    worst = 0.0
    for k in range(1, d):
        val = 2.0 * (k - t[k - 1, k - 1])
        worst = max(worst, val)
    return float(np.sqrt(max(worst, 0.0)))


def flags_equal(xi: Flag, eta: Flag, tol: float = 1e-9) -> bool:
    return flag_distance(xi, eta) <= tol


@dataclass(frozen=True, eq=False)
class EdgeCocycle:
    """Edge-indexed SL_d matrices with the reverse edge carrying the inverse.

    Self-loop matrices must be involutions so that traversing the loop twice
    is the identity, matching the reverse-edge convention.
    """

    dim: int
    matrices: dict[Edge, np.ndarray]

    @classmethod
    def from_unordered(cls, graph: GraphSpec, assignments) -> "EdgeCocycle":
        """Build from one matrix per unordered edge.

        assignments: iterable of (u, v, matrix); each unordered graph edge
        must be covered exactly once, and the reverse direction is filled
        with the matrix inverse.
        """
        items = [(str(u), str(v), np.array(m, dtype=float)) for u, v, m in assignments]
        if not items:
            raise ValidationError("cocycle needs at least one edge matrix")
        d = items[0][2].shape[0]
        mats: dict[Edge, np.ndarray] = {}
        seen: set[frozenset] = set()
        for u, v, m in items:
            if (u, v) not in graph.edges:
                raise ValidationError(f"matrix given for ({u}, {v}) which is not an edge")
            if m.shape != (d, d):
                raise ValidationError(f"matrix for ({u}, {v}) is not {d}x{d}")
            key = frozenset(((u, v), (v, u)))
            if key in seen:
                raise ValidationError(f"matrix for unordered edge {{{u}, {v}}} given twice")
            seen.add(key)
            det = float(np.linalg.det(m))
            if abs(det - 1.0) > DET_TOL:
                raise ValidationError(
                    f"matrix for ({u}, {v}) has determinant {det}, not 1 within {DET_TOL}"
                )
            if u == v:
                if np.max(np.abs(m @ m - np.eye(d))) > DET_TOL:
                    raise ValidationError(
                        f"self-loop matrix at vertex {u} is not an involution"
                    )
                mats[(u, v)] = m
            else:
                mats[(u, v)] = m
                mats[(v, u)] = np.linalg.inv(m)
        for (u, v) in graph.edges:
            if (u, v) not in mats:
                raise ValidationError(f"no matrix assigned for edge ({u}, {v})")
        for (u, v) in graph.edges:
            if np.max(np.abs(mats[(u, v)] @ mats[(v, u)] - np.eye(d))) > DET_TOL:
                raise ValidationError(f"symmetry violated on edge ({u}, {v})")
        for m in mats.values():
            m.setflags(write=False)
        return cls(dim=d, matrices=mats)

    def unordered_items(self):
        """One (u, v, matrix) triple per unordered edge, in sorted order."""
        seen = set()
        for (u, v) in sorted(self.matrices):
            key = frozenset(((u, v), (v, u)))
            if key not in seen:
                seen.add(key)
                yield u, v, self.matrices[(u, v)]

    @classmethod
    def identity(cls, graph: GraphSpec, d: int) -> "EdgeCocycle":
        eye = np.eye(d)
        seen = set()
        items = []
        for (u, v) in sorted(graph.edges):
            key = frozenset(((u, v), (v, u)))
            if key not in seen:
                seen.add(key)
                items.append((u, v, eye))
        return cls.from_unordered(graph, items)

    def matrix(self, u: str, v: str) -> np.ndarray:
        try:
            return self.matrices[(u, v)]
        except KeyError:
            raise UnknownVertex(f"no cocycle matrix for edge ({u}, {v})") from None

    def tensor(self, chain: MarkovChain) -> np.ndarray:
        """Dense (V, V, d, d) lookup array, identity off the edge set."""
        n = chain.n_vertices
        out = np.tile(np.eye(self.dim), (n, n, 1, 1))
        for (u, v), m in self.matrices.items():
            out[chain.index(u), chain.index(v)] = m
        out.setflags(write=False)
        return out
