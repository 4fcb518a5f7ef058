"""Numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``MASKDIFF_PURE_PYTHON=1``. Signatures and results match the Cython module.
"""
import numpy as np


def cond_mi(p3, floor=1e-15):
    """I(X; C | A) in nats for a joint table indexed ``[a, x, c]``.

    Returns ``(value, skipped_mass)``; (a, c) cells whose probability falls
    below ``floor`` are dropped and their mass reported.
    """
    p3 = np.asarray(p3, dtype=np.float64)
    p_a = p3.sum(axis=(1, 2))
    p_ax = p3.sum(axis=2)
    p_ac = p3.sum(axis=1)
    keep = p_ac >= floor
    skipped = float(p_ac[~keep].sum())
    live = (p3 > 0) & keep[:, None, :]
    num = p3 * p_a[:, None, None]
    den = p_ax[:, :, None] * p_ac[:, None, :]
    terms = np.zeros_like(p3)
    terms[live] = p3[live] * np.log(num[live] / den[live])
    return float(terms.sum()), skipped


def expected_kl(p3, floor=1e-15):
    """E_{a,c}[ KL(P(x|a,c) || P(x|a)) ] for a joint table indexed ``[a, x, c]``."""
    p3 = np.asarray(p3, dtype=np.float64)
    p_a = p3.sum(axis=(1, 2))
    p_ac = p3.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        left = p3.sum(axis=2) / p_a[:, None]
        bi = p3 / p_ac[:, None, :]
        ratio = np.where(p3 > 0, bi / left[:, :, None], 1.0)
        kl = np.where(p3 > 0, bi * np.log(ratio), 0.0).sum(axis=1)
    keep = (p_ac >= floor) & (p_a[:, None] >= floor)
    skipped = float(p_ac[~keep].sum())
    return float((p_ac[keep] * kl[keep]).sum()), skipped


def monotone_path(score):
    """Maximum-sum monotone path through ``score[j, k]`` (rows j, columns k).

    Row 0 starts at column 0, the last row ends at the last column, and each
    row advances the column by 0 or 1. On ties the backtrace keeps the later
    column, so the path advances as early as possible.
    """
    score = np.asarray(score, dtype=np.float64)
    m, n = score.shape
    if n > m:
        raise ValueError("need at least as many rows as columns")
    q = np.full((m, n), -np.inf)
    q[0, 0] = score[0, 0]
    for j in range(1, m):
        stay = q[j - 1]
        move = np.concatenate(([-np.inf], q[j - 1, :-1]))
        q[j] = np.maximum(stay, move) + score[j]
    path = np.empty(m, dtype=np.int64)
    k = n - 1
    path[m - 1] = k
    for j in range(m - 1, 0, -1):
        if k > 0 and q[j - 1, k - 1] > q[j - 1, k]:
            k -= 1
        path[j - 1] = k
    return path


def chain_joint(init, trans, emit, n):
    """Joint probability of every length-``n`` observation sequence of a hidden
    Markov chain, flattened in C order (first position most significant)."""
    init = np.asarray(init, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    emit = np.asarray(emit, dtype=np.float64)
    v = emit.shape[1]
    alpha = init[None, :] * emit.T  # (V, H)
    for _ in range(n - 1):
        pred = alpha @ trans  # (S, H)
        alpha = (pred[:, None, :] * emit.T[None, :, :]).reshape(-1, trans.shape[0])
    return alpha.sum(axis=1).reshape((v,) * n).ravel()


def top_p_rows(probs, top_p, u):
    """Nucleus-sample one id per row of ``probs`` using uniforms ``u``.

    Candidates are sorted by descending probability, ties by lower id; the
    nucleus is the shortest prefix whose cumulative mass reaches ``top_p``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    r, v = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    sp = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sp, axis=1)
    k = np.minimum((cum < top_p).sum(axis=1), v - 1)
    mass = cum[np.arange(r), k]
    target = np.asarray(u, dtype=np.float64) * mass
    j = (cum <= target[:, None]).sum(axis=1)
    j = np.minimum(j, k)
    return order[np.arange(r), j].astype(np.int64)

