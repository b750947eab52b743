"""Numerically stable accumulation of edge-matrix products along paths.

The top-k growth exponents are tracked through exterior powers with per-step
scalar renormalization, so products of arbitrary length never overflow; the
flag-side accumulation transports a frame by one QR per step.  Long-run
Lyapunov estimation reduces blocks of step matrices by pairwise products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._batched import chain_matrix_product, operator_norms
from .errors import NumericalBreakdown, ValidationError
from .lie_sl import EdgeCocycle, Flag, iwasawa_step, wedge_power
from .markov_sft import MarkovChain, Trajectory, sample_trajectory


def kappa_from_chi(chi: np.ndarray) -> np.ndarray:
    """Recover the ordered log singular values from partial sums chi_1..chi_{d-1}.

    The boundary values chi_0 = chi_d = 0 are enforced, so the result sums to
    zero exactly.
    """
    chi = np.concatenate([[0.0], np.asarray(chi, dtype=float), [0.0]])
    return np.diff(chi)


class KappaAccumulator:
    """Running log norms of all exterior powers of an ordered matrix product."""

    def __init__(self, dim: int):
        self.dim = dim
        self._mats = [np.eye(math.comb(dim, k)) for k in range(1, dim)]
        self._logs = np.zeros(dim - 1)
        self.steps = 0

    def push(self, g: np.ndarray) -> None:
        for i, k in enumerate(range(1, self.dim)):
            w = wedge_power(g, k)
            a = w @ self._mats[i]
            s = np.linalg.norm(a, 2)
            if not np.isfinite(s) or s < 1e-300:
                raise NumericalBreakdown(f"wedge-{k} product collapsed at step {self.steps}")
            self._mats[i] = a / s
            self._logs[i] += np.log(s)
        self.steps += 1

    def chi(self) -> np.ndarray:
        """log norm of each exterior power of the accumulated product."""
        return self._logs + np.array([np.log(np.linalg.norm(m, 2)) for m in self._mats])

    def kappa(self) -> np.ndarray:
        return kappa_from_chi(self.chi())


class SigmaAccumulator:
    """Running flag transport with the accumulated log-diagonal vector."""

    def __init__(self, xi: Flag):
        self.flag = xi
        self.total = np.zeros(xi.dim)
        self.steps = 0

    def push(self, g: np.ndarray) -> None:
        inc, self.flag = iwasawa_step(g, self.flag)
        self.total = self.total + inc
        self.steps += 1


def accumulate_kappa(path: Trajectory, f: EdgeCocycle) -> np.ndarray:
    """Cartan projection of the ordered edge-matrix product along a path."""
    if len(path) < 1:
        raise ValidationError("path must contain at least one step")
    acc = KappaAccumulator(f.dim)
    names = path.vertex_names
    for a, b in path.step_pairs():
        acc.push(f.matrix(names[a], names[b]))
    return acc.kappa()


def accumulate_sigma(path: Trajectory, f: EdgeCocycle, xi: Flag):
    """Flag-side accumulation along a path: returns (sigma, transported flag)."""
    if len(path) < 1:
        raise ValidationError("path must contain at least one step")
    acc = SigmaAccumulator(xi)
    names = path.vertex_names
    for a, b in path.step_pairs():
        acc.push(f.matrix(names[a], names[b]))
    return acc.total, acc.flag


@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_hat: np.ndarray
    standard_errors: np.ndarray
    steps: int


def simplicity_margin(t: np.ndarray) -> float:
    """Smallest gap between consecutive components; positive iff simple."""
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        raise ValidationError("need at least two components")
    return float(np.min(t[:-1] - t[1:]))


def wedge_edge_tensors(chain: MarkovChain, f: EdgeCocycle) -> list[np.ndarray]:
    """Per-edge exterior-power matrices, one (V, V, C, C) array per order."""
    d = f.dim
    out = []
    for k in range(1, d):
        c = math.comb(d, k)
        t = np.tile(np.eye(c), (chain.n_vertices, chain.n_vertices, 1, 1))
        for (u, v), m in f.matrices.items():
            t[chain.index(u), chain.index(v)] = wedge_power(m, k)
        t.setflags(write=False)
        out.append(t)
    return out


def estimate_lyapunov(chain: MarkovChain, f: EdgeCocycle, n: int, burn_in: int,
                      rng: np.random.Generator) -> LyapunovEstimate:
    """Growth exponents from one long trajectory, with batch-means errors.

    The post-burn-in stretch is split into floor(sqrt(n)) batches; the
    per-batch increments of the exterior-power log norms estimate both the
    mean and its standard error.
    """
    if n <= 4:
        raise ValidationError("need more than 4 steps")
    traj = sample_trajectory(chain, None, n + burn_in, rng)
    idx = traj.indices[burn_in:]
    n_batches = math.isqrt(n)
    m = n // n_batches
    steps = n_batches * m
    tensors = wedge_edge_tensors(chain, f)
    d = f.dim

    running = [np.eye(t.shape[-1]) for t in tensors]
    logs = np.zeros(d - 1)
    chi_marks = np.empty((n_batches + 1, d - 1))
    chi_marks[0] = 0.0
    for j in range(n_batches):
        lo, hi = j * m, (j + 1) * m
        src, dst = idx[lo:hi], idx[lo + 1:hi + 1]
        for i, t in enumerate(tensors):
            block, block_log = chain_matrix_product(t[src, dst])
            a = block @ running[i]
            s = np.abs(a).max()
            running[i] = a / s
            logs[i] += block_log + np.log(s)
            chi_marks[j + 1, i] = logs[i] + np.log(np.linalg.norm(running[i], 2))

    batch_kappa = np.diff(
        np.pad(np.diff(chi_marks, axis=0), ((0, 0), (1, 1))), axis=1
    )  # (n_batches, d): per-batch kappa increments
    lam = kappa_from_chi(chi_marks[-1]) / steps
    se = batch_kappa.std(axis=0, ddof=1) / math.sqrt(n_batches) / m
    return LyapunovEstimate(lambda_hat=lam, standard_errors=se, steps=steps)
