"""Vectorized kernels shared by the estimators.

Everything here operates on stacked arrays: frames are (N, d, d), vertex
states are (N,) index arrays.  Scalar counterparts live in lie_sl and
markov_sft; the contracts are identical and the test suite pins agreement.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalBreakdown


def qr_pos_batched(mats: np.ndarray):
    """Stacked positive-diagonal QR: returns (frames, log diag of R)."""
    d = mats.shape[-1]
    if d == 2:
        a0 = mats[..., 0, 0]
        a1 = mats[..., 1, 0]
        b0 = mats[..., 0, 1]
        b1 = mats[..., 1, 1]
        r11 = np.hypot(a0, a1)
        if np.any(r11 < 1e-300) or not np.all(np.isfinite(r11)):
            raise NumericalBreakdown("QR column collapsed")
        q10 = a0 / r11
        q11 = a1 / r11
        det = a0 * b1 - a1 * b0
        sgn = np.sign(det)
        sgn[sgn == 0] = 1.0
        q = np.empty_like(mats)
        q[..., 0, 0] = q10
        q[..., 1, 0] = q11
        q[..., 0, 1] = -q11 * sgn
        q[..., 1, 1] = q10 * sgn
        r22 = np.abs(det) / r11
        if np.any(r22 < 1e-300):
            raise NumericalBreakdown("QR diagonal underflowed")
        return q, np.stack([np.log(r11), np.log(r22)], axis=-1)
    q, r = np.linalg.qr(mats)
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    s = np.sign(diag).copy()
    s[s == 0] = 1.0
    q = q * s[..., None, :]
    diag = diag * s
    if np.any(diag < 1e-300) or not np.all(np.isfinite(diag)):
        raise NumericalBreakdown("QR diagonal underflowed")
    return q, np.log(diag)


def transport_flags(mats: np.ndarray, frames: np.ndarray):
    """Apply stacked group elements to stacked flag frames.

    Returns (new frames, per-item sigma increments)."""
    return qr_pos_batched(np.matmul(mats, frames))


def step_vertices(cum_kernel: np.ndarray, cur: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized categorical step; same arithmetic as the scalar sampler."""
    nxt = (cum_kernel[cur] <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, cum_kernel.shape[1] - 1)


def replica_uniforms(master_seed: int, replica_ids, count: int) -> np.ndarray:
    """Per-replica uniform blocks; replica r draws from seed hash (master, r)."""
    out = np.empty((len(replica_ids), count))
    for row, r in enumerate(replica_ids):
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, int(r)))))
        out[row] = gen.random(count)
    return out


def chain_matrix_product(mats: np.ndarray):
    """Ordered product mats[L-1] @ ... @ mats[0] by pairwise reduction.

    Returns (unit-scale product, accumulated log scale).  The association
    order differs from a left fold but the product is the same matrix up to
    floating-point roundoff.
    """
    m = np.array(mats, dtype=float)
    scale = np.zeros(m.shape[0])
    while m.shape[0] > 1:
        odd = m.shape[0] % 2 == 1
        if odd:
            tail_m, tail_s = m[-1:], scale[-1:]
            m, scale = m[:-1], scale[:-1]
        prod = np.matmul(m[1::2], m[0::2])
        s = np.abs(prod).max(axis=(1, 2))
        if np.any(s == 0) or not np.all(np.isfinite(s)):
            raise NumericalBreakdown("matrix product collapsed during reduction")
        prod /= s[:, None, None]
        scale = scale[0::2] + scale[1::2] + np.log(s)
        if odd:
            m = np.concatenate([prod, tail_m])
            scale = np.concatenate([scale, tail_s])
        else:
            m, scale = prod, scale
    return m[0], float(scale[0])


def operator_norms(mats: np.ndarray) -> np.ndarray:
    """Top singular value per stacked matrix."""
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def pair_delta_profiles(q_xis: np.ndarray, q_etas: np.ndarray,
                        pairwise: bool = True) -> np.ndarray:
    """Pairing determinants |det [xi_(:k) | eta_(:d-k)]| for k = 1..d-1.

    q_xis: (A, d, d), q_etas: (B, d, d).  With pairwise=True the result is
    (A, B, d-1); otherwise A == B is required and rows are matched one to
    one, giving (A, d-1).  Dimensions 2 and 3 use closed forms.
    """
    d = q_xis.shape[-1]
    if d == 2:
        x = q_xis[..., :, 0]
        e = q_etas[..., :, 0]
        if pairwise:
            dets = x[:, None, 0] * e[None, :, 1] - x[:, None, 1] * e[None, :, 0]
        else:
            dets = x[:, 0] * e[:, 1] - x[:, 1] * e[:, 0]
        return np.abs(dets)[..., None]
    if d == 3:
        x1 = q_xis[..., :, 0]
        x12 = np.cross(q_xis[..., :, 0], q_xis[..., :, 1])
        e1 = q_etas[..., :, 0]
        e12 = np.cross(q_etas[..., :, 0], q_etas[..., :, 1])
        if pairwise:
            d1 = np.einsum("ai,bi->ab", x1, e12)
            d2 = np.einsum("ai,bi->ab", x12, e1)
        else:
            d1 = np.einsum("ai,ai->a", x1, e12)
            d2 = np.einsum("ai,ai->a", x12, e1)
        return np.abs(np.stack([d1, d2], axis=-1))
    # generic: assemble block matrices and take stacked determinants
    if pairwise:
        A, B = q_xis.shape[0], q_etas.shape[0]
        out = np.empty((A, B, d - 1))
        block = np.empty((A, B, d, d))
        for k in range(1, d):
            block[:, :, :, :k] = q_xis[:, None, :, :k]
            block[:, :, :, k:] = q_etas[None, :, :, : d - k]
            out[:, :, k - 1] = np.abs(np.linalg.det(block))
        return out
    A = q_xis.shape[0]
    out = np.empty((A, d - 1))
    block = np.empty((A, d, d))
    for k in range(1, d):
        block[:, :, :k] = q_xis[:, :, :k]
        block[:, :, k:] = q_etas[:, :, : d - k]
        out[:, k - 1] = np.abs(np.linalg.det(block))
    return out


def busemann_from_profiles(profiles: np.ndarray) -> np.ndarray:
    """Map pairing profiles (..., d-1) to a-vectors (..., d)."""
    chi = -np.log(profiles)
    pad = np.zeros(profiles.shape[:-1] + (1,))
    chi = np.concatenate([pad, chi, pad], axis=-1)
    return np.diff(chi, axis=-1)


def flag_distance_matrix(qa: np.ndarray, qb: np.ndarray, chunk: int = 256) -> np.ndarray:
    """All pairwise projector distances between two stacks of frames."""
    A, d = qa.shape[0], qa.shape[-1]
    B = qb.shape[0]
    out = np.empty((A, B))
    for lo in range(0, A, chunk):
        hi = min(lo + chunk, A)
        c = np.einsum("aij,bik->abjk", qa[lo:hi], qb)
        t = np.cumsum(np.cumsum(c * c, axis=2), axis=3)
        ks = np.arange(1, d)
        vals = 2.0 * (ks[None, None, :] - t[:, :, ks - 1, ks - 1])
        out[lo:hi] = np.sqrt(np.maximum(vals.max(axis=2), 0.0))
    return out


def h0_profile_means(q_xis: np.ndarray, fiber: np.ndarray,
                     floor: float = 1e-12, exclude_diagonal: bool = False):
    """Mean Busemann vector of each frame in q_xis against a fiber sample.

    Returns (means (A, d), ses (A, d), rejected count).  Pairs whose minimal
    pairing determinant is at or below the floor are excluded from the mean.
    """
    prof = pair_delta_profiles(q_xis, fiber, pairwise=True)  # (A, B, d-1)
    good = prof.min(axis=2) > floor
    if exclude_diagonal:
        np.fill_diagonal(good, False)
    rejected = int(prof.shape[0] * prof.shape[1] - good.sum())
    safe = np.where(good[..., None], prof, 1.0)
    h = busemann_from_profiles(safe)  # (A, B, d)
    w = good[..., None].astype(float)
    n = np.maximum(w.sum(axis=1), 1.0)
    mean = (h * w).sum(axis=1) / n
    var = ((h - mean[:, None, :]) ** 2 * w).sum(axis=1) / np.maximum(n - 1.0, 1.0)
    se = np.sqrt(var / n)
    return mean, se, rejected
