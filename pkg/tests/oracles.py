"""Independent brute-force reference implementations.

Everything here is written as plain loops over definitions, deliberately
ignoring how the library computes the same quantities, so tests compare two
unrelated code paths.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Six-nested-loop cross-correlation."""
    B, Cin, h, wdt = x.shape
    Cout, _, k, _ = w.shape
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wdt + 2 * padding - k) // stride + 1
    xp = np.zeros((B, Cin, h + 2 * padding, wdt + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wdt] = x
    out = np.zeros((B, Cout, out_h, out_w), dtype=np.float64)
    for bi in range(B):
        for co in range(Cout):
            for oi in range(out_h):
                for oj in range(out_w):
                    acc = 0.0
                    for ci in range(Cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[bi, ci, oi * stride + ki, oj * stride + kj]
                                    * w[co, ci, ki, kj]
                                )
                    out[bi, co, oi, oj] = acc + (b[co] if b is not None else 0.0)
    return out


def conv1d_channel_loops(x, w):
    """Per-sample 1-D convolution over channels with zero padding."""
    B, C = x.shape
    k = len(w)
    m = (k - 1) // 2
    out = np.zeros((B, C), dtype=np.float64)
    for bi in range(B):
        for c in range(C):
            acc = 0.0
            for j in range(k):
                src = c + j - m
                if 0 <= src < C:
                    acc += x[bi, src] * w[j]
            out[bi, c] = acc
    return out


def attention_pool_loops(z, temperature):
    """Softmax over per-position L2 norms divided by (C * T), then the
    weighted sum of channel vectors."""
    C, h, w = z.shape
    scores = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            scores[i, j] = math.sqrt(sum(z[c, i, j] ** 2 for c in range(C))) / (
                C * temperature
            )
    mx = scores.max()
    expd = np.exp(scores - mx)
    alpha = expd / expd.sum()
    f = np.zeros(C, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for c in range(C):
                f[c] += alpha[i, j] * z[c, i, j]
    return f, alpha


def elbo_terms(f, f_hat, mu, log_var, beta):
    """Reconstruction plus beta-weighted KL to a standard normal, term by
    term: (1/D)*||f-f_hat||^2 + (beta/2)*sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    D = len(f)
    recon = sum((float(f[i]) - float(f_hat[i])) ** 2 for i in range(D)) / D
    kl = 0.0
    for i in range(len(mu)):
        sigma_sq = math.exp(float(log_var[i]))
        kl += float(mu[i]) ** 2 + sigma_sq - 1.0 - float(log_var[i])
    return recon + 0.5 * beta * kl


def ewc_penalty_loops(fisher, params, anchor, lam):
    acc = 0.0
    for i in range(len(fisher)):
        acc += fisher[i] * (params[i] - anchor[i]) ** 2
    return lam * acc


def emr_merge_loops(task_vectors):
    """Coordinatewise election: value of largest magnitude where every task
    agrees in sign, zero elsewhere."""
    n = len(task_vectors[0])
    uni = np.zeros(n, dtype=np.float64)
    for i in range(n):
        signs = {np.sign(tv[i]) for tv in task_vectors}
        if 0.0 in signs or len(signs) > 1:
            continue
        best = max((tv[i] for tv in task_vectors), key=abs)
        uni[i] = best
    return uni


def emr_apply_loops(uni, task_vector):
    """Sign mask against the task vector, then rescale to its norm."""
    n = len(uni)
    masked = np.zeros(n, dtype=np.float64)
    for i in range(n):
        if np.sign(uni[i]) == np.sign(task_vector[i]) and uni[i] != 0.0:
            masked[i] = uni[i]
    denom = math.sqrt(sum(v * v for v in masked))
    if denom == 0.0:
        return masked, 0.0
    lam = math.sqrt(sum(v * v for v in task_vector)) / denom
    return masked * lam, lam


def iou_loops(pred, true):
    inter = 0
    union = 0
    for p, t in zip(pred.reshape(-1), true.reshape(-1)):
        p, t = bool(p), bool(t)
        inter += p and t
        union += p or t
    return 1.0 if union == 0 else inter / union


def boundary_band_loops(mask, d):
    """Pixels of the mask within Chebyshev distance d of a non-mask pixel,
    with everything outside the image counting as non-mask."""
    h, w = mask.shape
    band = np.zeros_like(mask, dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            near_background = False
            for di in range(-d, d + 1):
                for dj in range(-d, d + 1):
                    ni, nj = i + di, j + dj
                    if ni < 0 or nj < 0 or ni >= h or nj >= w:
                        near_background = True
                    elif not mask[ni, nj]:
                        near_background = True
            band[i, j] = near_background
    return band


def biou_loops(pred, true, d):
    bp = boundary_band_loops(pred.astype(bool), d)
    bt = boundary_band_loops(true.astype(bool), d)
    return iou_loops(bp, bt)


def tv_loops(p, q):
    return 0.5 * sum(abs(float(a) - float(b)) for a, b in zip(p, q))


def js_loops(p, q):
    m = [(float(a) + float(b)) / 2 for a, b in zip(p, q)]

    def kl(a_dist, m_dist):
        acc = 0.0
        for a, mm in zip(a_dist, m_dist):
            if a > 0:
                acc += a * math.log(a / mm)
        return acc

    return 0.5 * kl([float(v) for v in p], m) + 0.5 * kl([float(v) for v in q], m)


def stage_aggregate_loops(per_stage):
    """per_stage: {stage t: {task k: (iou, biou, n)}} with stages 1..N and
    tasks 1..t (integer keyed, possibly 0-based; only structure matters)."""
    stages = sorted(per_stage)
    N = len(stages)

    def stage_mean(t, idx):
        tasks = per_stage[t]
        total_n = sum(n for _, _, n in tasks.values())
        return sum(vals[idx] * vals[2] for vals in tasks.values()) / total_n

    def aggregate(idx):
        last = stage_mean(stages[-1], idx)
        avg = sum(stage_mean(t, idx) for t in stages) / N
        if N == 1:
            return last, avg, 0.0
        final_tasks = per_stage[stages[-1]]
        ks = sorted(final_tasks)[:-1]
        total_f = 0.0
        for k in ks:
            history = [per_stage[t][k][idx] for t in stages if k in per_stage[t]]
            total_f += max(0.0, max(h - history[-1] for h in history[:-1]))
        return last, avg, total_f / (N - 1)

    return aggregate(0), aggregate(1)
