"""Empirical stationary measures on flag fibers and the centering data.

The chain on (vertex, flag) pairs is simulated forward (kernel P) or in
reversed time (kernel P-check); in both directions a step from u to v acts
on the flag by the matrix attached to the traversed edge.  Fiber measures
are stored as per-vertex frame stacks and everything downstream is a lazy
Monte Carlo functional of those samples: the depth average h0, the edge
drift table L0, its potential decomposition, and the one-step conditional
residual that certifies the centering convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._batched import (
    flag_distance_matrix,
    h0_profile_means,
    pair_delta_profiles,
    qr_pos_batched,
)
from .cocycle_engine import LyapunovEstimate
from .errors import (
    InsufficientSamples,
    TooManyRejections,
    ValidationError,
)
from .lie_sl import EdgeCocycle, Flag, iwasawa_step
from .markov_sft import MarkovChain, _draw

GENERAL_POSITION_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class FiberMeasure:
    """Equal-weight flag samples per vertex, from one skew-product run."""

    direction: str  # "forward" | "backward"
    vertex_names: tuple[str, ...]
    samples: tuple[np.ndarray, ...]  # per vertex, (n_v, d, d)
    burn_in: int
    sample_count: int
    thin: int

    def fiber(self, chain: MarkovChain, v: str) -> np.ndarray:
        return self.samples[chain.index(v)]

    def vertex_counts(self) -> np.ndarray:
        return np.array([s.shape[0] for s in self.samples])

    @property
    def dim(self) -> int:
        return self.samples[0].shape[-1]


@dataclass(frozen=True)
class MonteCarloVector:
    value: np.ndarray
    standard_errors: np.ndarray
    n_used: int
    n_rejected: int


@dataclass(frozen=True, eq=False)
class CenteringData:
    """Everything needed to center the per-step flag increments.

    h0 stays a function evaluated lazily from the stored backward fiber;
    only the edge drift table L0 and its potential decomposition are
    tabulated.  l0_table is in exact potential form -lambda + psi(u) -
    psi(v); raw_l0_table keeps the direct fiber integrals, which agree with
    l0_table in kernel-row averages (all the one-step conditional mean sees)
    but are not themselves a potential.
    """

    backward: FiberMeasure
    l0_table: dict
    l0_se: dict
    psi: dict
    fit_residual: float
    raw_l0_table: dict
    raw_fit_residual: float
    lambda_hat: np.ndarray
    convention: str


def estimate_fiber_measures(chain: MarkovChain, f: EdgeCocycle, direction: str,
                            burn_in: int, samples: int, rng: np.random.Generator,
                            thin: int = 1, start_flag: Flag | None = None) -> FiberMeasure:
    """Run the chain on (vertex, flag) pairs and bucket post-burn-in states.

    direction "forward" drives vertices by the kernel, "backward" by the
    reversed kernel; each traversed edge (u, v) acts by its own matrix, so
    the backward run applies the inverses of the forward maps.  thin > 1
    records every thin-th state to cut autocorrelation.
    """
    if direction not in ("forward", "backward"):
        raise ValidationError(f"unknown direction {direction!r}")
    if samples < 1:
        raise ValidationError("need at least one sample")
    reversed_time = direction == "backward"
    rows = chain.cum_rows(reversed_time)
    names = chain.graph.vertices
    d = f.dim
    q = (start_flag.q if start_flag is not None else np.eye(d)).copy()
    cur = _draw(chain._cum_stationary, rng.random())

    mats = f.tensor(chain)
    buckets: list[list[np.ndarray]] = [[] for _ in names]
    total_steps = burn_in + samples * thin
    u = rng.random(total_steps)
    for t in range(total_steps):
        nxt = _draw(rows[cur], u[t])
        a = mats[cur, nxt] @ q
        qq, r = np.linalg.qr(a)
        s = np.sign(np.diagonal(r)).copy()
        s[s == 0] = 1.0
        q = qq * s
        cur = nxt
        k = t - burn_in + 1
        if k > 0 and k % thin == 0:
            buckets[cur].append(q.copy())
    stacked = tuple(
        np.array(b) if b else np.empty((0, d, d)) for b in buckets
    )
    return FiberMeasure(direction=direction, vertex_names=names, samples=stacked,
                        burn_in=burn_in, sample_count=samples, thin=thin)


def _energy_statistic(dist: np.ndarray, ia: np.ndarray, ib: np.ndarray) -> float:
    """Energy distance statistic from a pooled pairwise-distance matrix."""
    dxy = dist[np.ix_(ia, ib)].mean()
    dxx = dist[np.ix_(ia, ia)].mean()
    dyy = dist[np.ix_(ib, ib)].mean()
    return float(2.0 * dxy - dxx - dyy)


def _energy_compare(x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                    permutations: int = 64) -> dict:
    """Energy statistic of two frame stacks with a permutation null scale."""
    pool = np.concatenate([x, y])
    dist = flag_distance_matrix(pool, pool)
    na = x.shape[0]
    idx = np.arange(pool.shape[0])
    stat = _energy_statistic(dist, idx[:na], idx[na:])
    null = np.empty(permutations)
    for p in range(permutations):
        perm = rng.permutation(idx)
        null[p] = _energy_statistic(dist, perm[:na], perm[na:])
    null_mean = float(null.mean())
    null_se = float(null.std(ddof=1))
    return {
        "statistic": stat,
        "null_mean": null_mean,
        "null_se": null_se,
        "zscore": (stat - null_mean) / null_se if null_se > 0 else math.inf,
    }


def stationarity_residual(measure: FiberMeasure, chain: MarkovChain, f: EdgeCocycle,
                          rng: np.random.Generator, pairs: int = 1024,
                          permutations: int = 64, min_samples: int = 1000) -> dict:
    """Per-vertex energy distance between each fiber and its one-step mixture.

    The mixture at v resamples fibers at in-neighbors u with weights
    pi(u) p(u, v) / pi(v) (reversed-kernel weights in the backward case) and
    pushes them through the traversed edge matrix.
    """
    counts = measure.vertex_counts()
    if counts.min() < min_samples:
        raise InsufficientSamples(
            f"need >= {min_samples} samples per vertex, have {counts.min()}"
        )
    reversed_time = measure.direction == "backward"
    kernel = chain.reversed_kernel if reversed_time else chain.kernel
    pi = chain.stationary
    out = {}
    for vi, v in enumerate(chain.graph.vertices):
        x = measure.samples[vi]
        m = min(pairs, x.shape[0])
        x_sub = x[rng.choice(x.shape[0], size=m, replace=False)]
        weights = pi * kernel[:, vi] / pi[vi]
        weights = weights / weights.sum()
        pick_u = rng.choice(chain.n_vertices, size=m, p=weights)
        ys = np.empty((m, f.dim, f.dim))
        for ui in np.unique(pick_u):
            rows = np.flatnonzero(pick_u == ui)
            src = measure.samples[ui]
            chosen = src[rng.integers(0, src.shape[0], size=rows.size)]
            g = f.matrix(chain.name(ui), v)
            ys[rows] = qr_pos_batched(np.matmul(g, chosen))[0]
        out[v] = _energy_compare(x_sub, ys, rng, permutations)
    return out


def reproducibility_residual(a: FiberMeasure, b: FiberMeasure, chain: MarkovChain,
                             rng: np.random.Generator, pairs: int = 1024,
                             permutations: int = 64) -> dict:
    """Energy comparison of two independently seeded runs, per vertex."""
    out = {}
    for vi, v in enumerate(chain.graph.vertices):
        x, y = a.samples[vi], b.samples[vi]
        m = min(pairs, x.shape[0], y.shape[0])
        xs = x[rng.choice(x.shape[0], size=m, replace=False)]
        ys = y[rng.choice(y.shape[0], size=m, replace=False)]
        out[v] = _energy_compare(xs, ys, rng, permutations)
    return out


def regularity_probe(measure: FiberMeasure, chain: MarkovChain, test_flags,
                     tau_grid) -> list[dict]:
    """Empirical inverse-pairing moments per vertex and probe flag.

    Each row reports the moment estimate at one tau together with a
    stability verdict: the full-sample estimate must sit within three
    standard errors of the half-sample one.
    """
    rows = []
    for vi, v in enumerate(chain.graph.vertices):
        fiber = measure.samples[vi]
        for fi, flag in enumerate(test_flags):
            prof = pair_delta_profiles(flag.q[None, :, :], fiber)[0]
            delta = prof.min(axis=1)
            for tau in tau_grid:
                with np.errstate(divide="ignore", over="ignore"):
                    vals = delta ** (-float(tau))
                est = float(vals.mean())
                half = float(vals[: vals.size // 2].mean())
                se = float(vals.std(ddof=1) / math.sqrt(vals.size))
                stable = bool(np.isfinite(est) and np.isfinite(half)
                              and abs(est - half) <= 3.0 * se + 1e-15)
                rows.append({
                    "vertex": v,
                    "flag": fi,
                    "tau": float(tau),
                    "estimate": est,
                    "se": se,
                    "stable": stable,
                })
    return rows


def estimate_h0(measure: FiberMeasure, chain: MarkovChain, v: str, xi: Flag,
                max_samples: int | None = None,
                rng: np.random.Generator | None = None) -> MonteCarloVector:
    """Monte Carlo depth average of xi against the fiber at v.

    Samples pairing-degenerate against xi (minimal determinant at or below
    1e-12) are rejected and counted; more than 1% rejections aborts.
    """
    fiber = measure.fiber(chain, v)
    if fiber.shape[0] == 0:
        raise InsufficientSamples(f"no fiber samples at vertex {v}")
    if max_samples is not None and fiber.shape[0] > max_samples:
        if rng is None:
            fiber = fiber[:max_samples]
        else:
            fiber = fiber[rng.choice(fiber.shape[0], size=max_samples, replace=False)]
    mean, se, rejected = h0_profile_means(xi.q[None, :, :], fiber,
                                          floor=GENERAL_POSITION_FLOOR)
    total = fiber.shape[0]
    if rejected > 0.01 * total:
        raise TooManyRejections(
            f"{rejected} of {total} fiber samples degenerate against the probe flag"
        )
    return MonteCarloVector(value=mean[0], standard_errors=se[0],
                            n_used=total - rejected, n_rejected=rejected)


def estimate_L0(measure: FiberMeasure, f: EdgeCocycle, u: str, v: str,
                chain: MarkovChain, convention: str = "martingale") -> MonteCarloVector:
    """Edge drift: fiber average of the reversed-and-negated step increment.

    convention "martingale": minus the fiber-v average (backward measure) of
    iota sigma(f_uv^{-1}, .); this is the convention under which the one-step
    conditional residual vanishes.  convention "descent": plus the fiber-u
    average (forward measure) of the same integrand.
    """
    g_inv = f.matrix(v, u)  # f_uv^{-1}
    if convention == "martingale":
        if measure.direction != "backward":
            raise ValidationError("martingale convention integrates the backward measure")
        fiber = measure.fiber(chain, v)
        sign = -1.0
    elif convention == "descent":
        if measure.direction != "forward":
            raise ValidationError("descent convention integrates the forward measure")
        fiber = measure.fiber(chain, u)
        sign = 1.0
    else:
        raise ValidationError(f"unknown L0 convention {convention!r}")
    if fiber.shape[0] < 2:
        raise InsufficientSamples(f"not enough fiber samples for edge ({u}, {v})")
    _, logdiag = qr_pos_batched(np.matmul(g_inv, fiber))
    vals = sign * logdiag[:, ::-1] * (-1.0)  # sign * iota(sigma)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    return MonteCarloVector(value=mean, standard_errors=se,
                            n_used=vals.shape[0], n_rejected=0)


def potential_decomposition(l0_table: dict, lambda_hat: np.ndarray,
                            vertices) -> dict:
    """Least-squares vertex potential for the edge drift table.

    Solves L0(u, v) = -lambda + psi(u) - psi(v) with psi pinned to zero at
    the first vertex; fit_residual is the worst edge deviation.
    """
    vertices = list(vertices)
    index = {v: i for i, v in enumerate(vertices)}
    edges = sorted(l0_table)
    d = len(lambda_hat)
    a = np.zeros((len(edges), len(vertices) - 1))
    y = np.zeros((len(edges), d))
    for r, (u, v) in enumerate(edges):
        if index[u] > 0:
            a[r, index[u] - 1] += 1.0
        if index[v] > 0:
            a[r, index[v] - 1] -= 1.0
        y[r] = np.asarray(l0_table[(u, v)]) + lambda_hat
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    psi = {vertices[0]: np.zeros(d)}
    for v in vertices[1:]:
        psi[v] = sol[index[v] - 1]
    worst = 0.0
    for (u, v) in edges:
        pred = -lambda_hat + psi[u] - psi[v]
        worst = max(worst, float(np.linalg.norm(l0_table[(u, v)] - pred)))
    return {"psi": psi, "fit_residual": worst}


def solve_row_potential(chain: MarkovChain, raw_table: dict) -> dict:
    """Potential-form drift table matching a raw table's kernel-row averages.

    The one-step conditional mean only sees the kernel-row averages
    R(u) = sum_v p(u, v) L0(u, v), while trajectory sums telescope only for
    tables of the form -lam + psi(u) - psi(v).  Both hold at once for the
    solution of the chain Poisson equation (I - P) psi = R + lam, where lam
    is minus the pi-weighted mean of R (which makes the equation solvable
    exactly).  psi is gauged to zero at the first vertex.
    """
    nv = chain.n_vertices
    d = len(next(iter(raw_table.values())))
    rows = np.zeros((nv, d))
    for (u, v), val in raw_table.items():
        ui, vi = chain.index(u), chain.index(v)
        rows[ui] += chain.kernel[ui, vi] * np.asarray(val)
    lam = -chain.stationary @ rows
    rho = rows + lam
    a = np.vstack([np.eye(nv) - chain.kernel, np.eye(nv)[:1]])
    b = np.vstack([rho, np.zeros((1, d))])
    psi, *_ = np.linalg.lstsq(a, b, rcond=None)
    table = {}
    for (u, v) in raw_table:
        table[(u, v)] = -lam + psi[chain.index(u)] - psi[chain.index(v)]
    psi_map = {v: psi[chain.index(v)] for v in chain.graph.vertices}
    return {"table": table, "psi": psi_map, "lambda_table": lam}


def build_centering(chain: MarkovChain, f: EdgeCocycle, backward: FiberMeasure,
                    lyap: LyapunovEstimate, convention: str = "martingale",
                    forward: FiberMeasure | None = None) -> CenteringData:
    """Estimate the edge drift on every directed edge and put it in potential form.

    The raw fiber integrals are kept for diagnosis; the operative table used
    by every downstream consumer is their row-average-preserving potential
    projection, so the centered increments are conditionally mean-zero and
    their trajectory sums stay within a bounded coboundary of the
    drift-corrected growth vectors.
    """
    if convention == "descent" and forward is None:
        raise ValidationError("descent convention needs the forward fiber measure")
    measure = backward if convention == "martingale" else forward
    raw_table, l0_se = {}, {}
    for (u, v) in sorted(chain.graph.edges):
        est = estimate_L0(measure, f, u, v, chain, convention=convention)
        raw_table[(u, v)] = est.value
        l0_se[(u, v)] = est.standard_errors
    raw_fit = potential_decomposition(raw_table, lyap.lambda_hat, chain.graph.vertices)
    solved = solve_row_potential(chain, raw_table)
    table = solved["table"]
    fit = potential_decomposition(table, lyap.lambda_hat, chain.graph.vertices)
    return CenteringData(
        backward=backward,
        l0_table=table,
        l0_se=l0_se,
        psi=solved["psi"],
        fit_residual=fit["fit_residual"],
        raw_l0_table=raw_table,
        raw_fit_residual=raw_fit["fit_residual"],
        lambda_hat=np.asarray(lyap.lambda_hat),
        convention=convention,
    )


def flip_l0_sign(centering: CenteringData) -> CenteringData:
    """Centering data with the drift table negated; used as a fault injector."""
    return replace(
        centering,
        l0_table={e: -val for e, val in centering.l0_table.items()},
        convention=centering.convention + "-flipped",
    )


def martingale_residual(chain: MarkovChain, f: EdgeCocycle, centering: CenteringData,
                        u: str, xi: Flag, max_samples: int | None = None,
                        rng: np.random.Generator | None = None):
    """One-step conditional mean of the centered increment at (u, xi).

    Averages sigma(f_uv, xi) - h0(v, f_uv xi) + h0(u, xi) + L0(u, v) over the
    kernel row at u.  Returns (residual, propagated standard errors); both
    are a-vectors.  The residual is compatible with zero exactly under the
    martingale convention for L0.
    """
    ui = chain.index(u)
    h_u = estimate_h0(centering.backward, chain, u, xi, max_samples, rng)
    r = h_u.value.copy()
    var = h_u.standard_errors ** 2
    for vi in range(chain.n_vertices):
        p = chain.kernel[ui, vi]
        if p == 0.0:
            continue
        v = chain.name(vi)
        sig, moved = iwasawa_step(f.matrix(u, v), xi)
        h_v = estimate_h0(centering.backward, chain, v, moved, max_samples, rng)
        l0 = centering.l0_table[(u, v)]
        l0_se = centering.l0_se[(u, v)]
        r = r + p * (sig - h_v.value + l0)
        var = var + p ** 2 * (h_v.standard_errors ** 2 + l0_se ** 2)
    return r, np.sqrt(var)


def lyapunov_from_stationary(measure: FiberMeasure, chain: MarkovChain,
                             f: EdgeCocycle) -> MonteCarloVector:
    """Drift recovered from the forward fiber measures.

    Averages sigma(f_uv, xi) over xi in the fiber at u, weighted by
    pi(u) p(u, v) over directed edges.
    """
    if measure.direction != "forward":
        raise ValidationError("drift recovery integrates the forward measure")
    d = f.dim
    total = np.zeros(d)
    var = np.zeros(d)
    for (u, v) in sorted(chain.graph.edges):
        ui, vi = chain.index(u), chain.index(v)
        w = chain.stationary[ui] * chain.kernel[ui, vi]
        fiber = measure.samples[ui]
        if fiber.shape[0] < 2:
            raise InsufficientSamples(f"no fiber samples at vertex {u}")
        _, logdiag = qr_pos_batched(np.matmul(f.matrix(u, v), fiber))
        total += w * logdiag.mean(axis=0)
        var += (w * logdiag.std(axis=0, ddof=1) / math.sqrt(fiber.shape[0])) ** 2
    return MonteCarloVector(value=total, standard_errors=np.sqrt(var),
                            n_used=measure.sample_count, n_rejected=0)
