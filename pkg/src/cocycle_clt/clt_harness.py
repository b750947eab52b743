"""Monte Carlo CLT experiment for the normalized growth vectors.

Replicas are independent trajectories; replica r draws its randomness from
the seed hash (master seed, r), so results are bit-reproducible and
independent of batching or thread scheduling.  Covariance lives on the
sum-zero subspace; normality is probed direction-wise with one-sample
Kolmogorov-Smirnov distances plus standardized third and fourth moments.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._batched import (
    h0_profile_means,
    operator_norms,
    qr_pos_batched,
    replica_uniforms,
    step_vertices,
)
from .cocycle_engine import (
    KappaAccumulator,
    LyapunovEstimate,
    SigmaAccumulator,
    wedge_edge_tensors,
)
from .errors import (
    CenteringBiasError,
    DegenerateCovariance,
    ValidationError,
)
from .lie_sl import EdgeCocycle, Flag
from .markov_sft import MarkovChain, Trajectory
from .stationary import CenteringData

DEGENERACY_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CltSampleSet:
    """Per-replica normalized growth vectors for one trajectory length."""

    n: int
    v_samples: np.ndarray        # (N, d): from the singular-value side
    w_samples: np.ndarray        # (N, d): from the flag side
    final_vertices: np.ndarray   # (N,) vertex indices
    vertex_names: tuple[str, ...]
    lambda_hat: np.ndarray
    xi: Flag
    seed: int


@dataclass(frozen=True, eq=False)
class CovarianceTensor:
    """Symmetric covariance supported on the sum-zero subspace."""

    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def min_eig_sum_zero(self) -> float:
        basis = helmert_basis(self.dim)
        restricted = basis @ self.matrix @ basis.T
        return float(np.linalg.eigvalsh(restricted).min())

    @property
    def degenerate(self) -> bool:
        return self.min_eig_sum_zero() < DEGENERACY_FLOOR


@dataclass(frozen=True)
class CovarianceEstimate:
    tensor: CovarianceTensor
    min_eig_on_a: float
    degenerate: bool


def helmert_basis(d: int) -> np.ndarray:
    """Orthonormal basis of the sum-zero subspace, rows of shape (d-1, d)."""
    rows = np.zeros((d - 1, d))
    for k in range(1, d):
        rows[k - 1, :k] = 1.0
        rows[k - 1, k] = -float(k)
        rows[k - 1] /= math.sqrt(k * (k + 1))
    return rows


def _run_replica_block(chain, ftensor, wtensors, xi_q, n, lam, seed, replica_ids):
    """All replicas in one block, stepped together, one vector op per step."""
    b = len(replica_ids)
    d = xi_q.shape[0]
    u = replica_uniforms(seed, replica_ids, n + 1)
    cum_pi = np.asarray(chain._cum_stationary)
    cum_kernel = np.array(chain.kernel).cumsum(axis=1)
    cur = np.minimum((cum_pi <= u[:, 0][:, None]).sum(axis=1), chain.n_vertices - 1)

    prods = [np.tile(np.eye(t.shape[-1]), (b, 1, 1)) for t in wtensors]
    logs = [np.zeros(b) for _ in wtensors]
    frames = np.tile(xi_q, (b, 1, 1))
    sigma = np.zeros((b, d))
    for t in range(n):
        nxt = step_vertices(cum_kernel, cur, u[:, t + 1])
        for i, wt in enumerate(wtensors):
            prods[i] = np.matmul(wt[cur, nxt], prods[i])
            s = np.abs(prods[i]).max(axis=(1, 2))
            prods[i] /= s[:, None, None]
            logs[i] += np.log(s)
        frames, inc = qr_pos_batched(np.matmul(ftensor[cur, nxt], frames))
        sigma += inc
        cur = nxt
    chi = np.stack(
        [logs[i] + np.log(operator_norms(prods[i])) for i in range(len(wtensors))],
        axis=1,
    )  # (b, d-1)
    kappa = np.diff(np.pad(chi, ((0, 0), (1, 1))), axis=1)
    root = math.sqrt(n)
    v = (kappa - n * lam) / root
    w = (sigma - n * lam) / root
    return v, w, cur


def run_clt(chain: MarkovChain, f: EdgeCocycle, n: int, replicas: int, xi: Flag,
            lyap: LyapunovEstimate, seed: int, threads: int = 1,
            block_size: int = 2500) -> CltSampleSet:
    """Sample the two normalized growth vectors over independent replicas.

    Refuses to report when the drift estimate is too noisy for this n: the
    run requires se(drift) * sqrt(n) <= 0.05 * sqrt(min eig of the sample
    covariance on the sum-zero subspace), unless that covariance is itself
    degenerate (which downstream reporting flags instead).
    """
    if replicas < 2:
        raise ValidationError("need at least 2 replicas")
    lam = np.asarray(lyap.lambda_hat, dtype=float)
    ftensor = f.tensor(chain)
    wtensors = wedge_edge_tensors(chain, f)
    blocks = [range(lo, min(lo + block_size, replicas))
              for lo in range(0, replicas, block_size)]

    def work(ids):
        return _run_replica_block(chain, ftensor, wtensors, xi.q, n, lam, seed, list(ids))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(ids) for ids in blocks]

    v = np.concatenate([r[0] for r in results])
    w = np.concatenate([r[1] for r in results])
    fin = np.concatenate([r[2] for r in results])
    sample = CltSampleSet(n=n, v_samples=v, w_samples=w, final_vertices=fin,
                          vertex_names=chain.graph.vertices, lambda_hat=lam,
                          xi=xi, seed=seed)
    est = covariance_estimate(v)
    se_scale = float(np.max(lyap.standard_errors)) * math.sqrt(n)
    if not est.degenerate and se_scale > 0.05 * math.sqrt(est.min_eig_on_a):
        raise CenteringBiasError(
            f"drift se {np.max(lyap.standard_errors):.3g} * sqrt(n) = {se_scale:.3g} "
            f"exceeds 5% of the fluctuation scale {math.sqrt(est.min_eig_on_a):.3g}"
        )
    return sample


def covariance_estimate(samples: np.ndarray) -> CovarianceEstimate:
    """Sample covariance (1/N normalization) with its sum-zero minimum eigenvalue."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("need an (N, d) sample array with N >= 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    tensor = CovarianceTensor(matrix=cov)
    min_eig = tensor.min_eig_sum_zero()
    return CovarianceEstimate(tensor=tensor, min_eig_on_a=min_eig,
                              degenerate=min_eig < DEGENERACY_FLOOR)


def bootstrap_covariance_se(samples: np.ndarray, rng: np.random.Generator,
                            resamples: int = 200):
    """Bootstrap standard errors for the covariance entries and its min eigenvalue."""
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    covs = np.empty((resamples, d, d))
    eigs = np.empty(resamples)
    basis = helmert_basis(d)
    for i in range(resamples):
        idx = rng.integers(0, n, size=n)
        y = x[idx]
        c = y - y.mean(axis=0)
        cov = c.T @ c / n
        covs[i] = cov
        eigs[i] = np.linalg.eigvalsh(basis @ cov @ basis.T).min()
    return covs.std(axis=0, ddof=1), float(eigs.std(ddof=1))


def whiten_samples(samples: np.ndarray, cov: CovarianceTensor):
    """Project to the sum-zero subspace and whiten by the covariance there."""
    d = cov.dim
    basis = helmert_basis(d)
    restricted = basis @ cov.matrix @ basis.T
    eigval, eigvec = np.linalg.eigh(restricted)
    if eigval.min() < DEGENERACY_FLOOR:
        raise DegenerateCovariance(
            f"minimum eigenvalue {eigval.min():.3g} on the sum-zero subspace"
        )
    y = samples @ basis.T
    z = (y - y.mean(axis=0)) @ eigvec / np.sqrt(eigval)
    return z, eigval


def normality_report(samples: np.ndarray, cov: CovarianceTensor,
                     directions_seed: int = 20260809) -> list[dict]:
    """Direction-wise normality table for whitened samples.

    Rows cover each principal direction and eight seeded random unit
    directions: Kolmogorov-Smirnov distance to the standard normal,
    skewness, and the standardized fourth moment (3 is Gaussian).
    """
    z, _ = whiten_samples(samples, cov)
    k = z.shape[1]
    dirs = [np.eye(k)[i] for i in range(k)]
    labels = [f"pc{i + 1}" for i in range(k)]
    rng = np.random.default_rng(directions_seed)
    for i in range(8):
        vec = rng.standard_normal(k)
        dirs.append(vec / np.linalg.norm(vec))
        labels.append(f"rand{i + 1}")
    rows = []
    for label, vec in zip(labels, dirs):
        x = z @ vec
        sd = x.std(ddof=0)
        ks = stats.kstest(x, "norm").statistic
        rows.append({
            "direction": label,
            "ks_distance": float(ks),
            "skewness": float(((x - x.mean()) ** 3).mean() / sd ** 3),
            "kurtosis": float(((x - x.mean()) ** 4).mean() / sd ** 4),
        })
    return rows


def qq_table(samples: np.ndarray, cov: CovarianceTensor) -> np.ndarray:
    """Sorted first-principal-direction samples against normal quantiles."""
    z, _ = whiten_samples(samples, cov)
    x = np.sort(z[:, 0])
    n = x.size
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return np.stack([x, q], axis=1)


def kappa_sigma_gap(path: Trajectory, f: EdgeCocycle, xi: Flag) -> dict:
    """Per-step distance between the two growth vectors along one path."""
    if len(path) < 1:
        raise ValidationError("path must contain at least one step")
    kacc = KappaAccumulator(f.dim)
    sacc = SigmaAccumulator(xi)
    names = path.vertex_names
    gaps = np.empty(len(path))
    for t, (a, b) in enumerate(path.step_pairs()):
        g = f.matrix(names[a], names[b])
        kacc.push(g)
        sacc.push(g)
        gaps[t] = np.linalg.norm(sacc.total - kacc.kappa())
    return {"series": gaps, "max_gap": float(gaps.max())}


def phi_integral_estimate(chain: MarkovChain, f: EdgeCocycle,
                          centering: CenteringData, samples_m: int,
                          rng: np.random.Generator):
    """Covariance from the stationary-integral formula.

    For each directed edge (u, v) with weight pi(u) p(u, v), flags are drawn
    from the backward fiber at u; the centered one-step increment
    sigma(f_uv, .) - h0(v, f_uv .) + h0(u, .) + L0(u, v) is squared and
    averaged.  Returns (CovarianceTensor, entrywise standard errors).
    """
    d = f.dim
    total = np.zeros((d, d))
    var = np.zeros((d, d))
    measure = centering.backward
    for (u, v) in sorted(chain.graph.edges):
        ui, vi = chain.index(u), chain.index(v)
        weight = chain.stationary[ui] * chain.kernel[ui, vi]
        fiber_u = measure.samples[ui]
        fiber_v = measure.samples[vi]
        m = min(samples_m, fiber_u.shape[0])
        xs = fiber_u[rng.choice(fiber_u.shape[0], size=m, replace=False)]
        g = f.matrix(u, v)
        moved, sig = qr_pos_batched(np.matmul(g, xs))
        # self-pairings inside fiber_u have a vanishing pairing determinant
        # and are dropped by the floor inside h0_profile_means
        h_u, _, _ = h0_profile_means(xs, fiber_u)
        h_v, _, _ = h0_profile_means(moved, fiber_v)
        bracket = sig - h_v + h_u + centering.l0_table[(u, v)][None, :]
        outer = bracket[:, :, None] * bracket[:, None, :]
        total += weight * outer.mean(axis=0)
        var += (weight * outer.std(axis=(0,), ddof=1) / math.sqrt(m)) ** 2
    return CovarianceTensor(matrix=0.5 * (total + total.T)), np.sqrt(var)


def lindeberg_statistic(chain: MarkovChain, f: EdgeCocycle,
                        centering: CenteringData, epsilon: float, n_grid,
                        replicas: int, seed: int, h0_samples: int = 512,
                        xi: Flag | None = None) -> list[dict]:
    """Tail second moment of the centered one-step increments, per n.

    For each n the statistic averages |increment|^2 over all sampled steps
    that exceed sqrt(n) * epsilon in norm; under a square-integrable
    increment law it must vanish as n grows.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    d = f.dim
    xi_q = (xi.q if xi is not None else np.eye(d))
    ftensor = f.tensor(chain)
    measure = centering.backward
    sub_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF1BE)))
    fibers = []
    for s in measure.samples:
        m = min(h0_samples, s.shape[0])
        fibers.append(s[sub_rng.choice(s.shape[0], size=m, replace=False)])
    l0_tensor = np.zeros((chain.n_vertices, chain.n_vertices, d))
    for (u, v), val in centering.l0_table.items():
        l0_tensor[chain.index(u), chain.index(v)] = val

    cum_pi = np.asarray(chain._cum_stationary)
    cum_kernel = np.array(chain.kernel).cumsum(axis=1)

    def h0_of(frames, verts):
        out = np.empty((frames.shape[0], d))
        for vi in np.unique(verts):
            rows = np.flatnonzero(verts == vi)
            mean, _, _ = h0_profile_means(frames[rows], fibers[vi])
            out[rows] = mean
        return out

    results = []
    for n in n_grid:
        threshold = math.sqrt(n) * epsilon
        u = replica_uniforms(seed + int(n), range(replicas), n + 1)
        cur = np.minimum((cum_pi <= u[:, 0][:, None]).sum(axis=1), chain.n_vertices - 1)
        frames = np.tile(xi_q, (replicas, 1, 1))
        h_cur = h0_of(frames, cur)
        tail_sum = 0.0
        exceed = 0
        for t in range(n):
            nxt = step_vertices(cum_kernel, cur, u[:, t + 1])
            frames, sig = qr_pos_batched(np.matmul(ftensor[cur, nxt], frames))
            h_nxt = h0_of(frames, nxt)
            bracket = sig - h_nxt + h_cur + l0_tensor[cur, nxt]
            norms = np.linalg.norm(bracket, axis=1)
            mask = norms >= threshold
            if mask.any():
                tail_sum += float((norms[mask] ** 2).sum())
                exceed += int(mask.sum())
            cur = nxt
            h_cur = h_nxt
        results.append({
            "n": int(n),
            "epsilon": float(epsilon),
            "statistic": tail_sum / (replicas * n),
            "exceedances": exceed,
            "sampled_steps": replicas * n,
        })
    return results
