"""Naive reference implementations used as oracles.

Everything here is written with explicit loops and kept independent of the
package's vectorized/jitted code paths.
"""

import math

import numpy as np


def oracle_normalize(features):
    out = np.array(features, dtype=np.float64, copy=True)
    for i in range(out.shape[0]):
        norm = math.sqrt(sum(v * v for v in out[i]))
        out[i] = out[i] / norm
    return out


def oracle_stage1_keep(features, w):
    """Windowed redundancy rule, entry by entry."""
    unit = oracle_normalize(features)
    n = unit.shape[0]
    keep = [True] * n
    for start in range(0, n, w):
        end = min(start + w, n)
        wp = end - start
        if wp < 2:
            continue
        sim = np.zeros((wp, wp))
        for i in range(wp):
            for j in range(wp):
                sim[i, j] = float(np.dot(unit[start + i], unit[start + j]))
        row_means = [sim[i].sum() / wp for i in range(wp)]
        if max(row_means) == min(row_means):
            continue  # every token equally redundant: mean+std can never be exceeded
        mu = sum(sim[i, j] for i in range(wp) for j in range(wp)) / (wp * wp)
        var = sum((sim[i, j] - mu) ** 2 for i in range(wp) for j in range(wp)) / (wp * wp)
        tau = mu + math.sqrt(var)
        drops = [row_means[i] > tau for i in range(wp)]
        if all(drops):
            best = min(range(wp), key=lambda i: (row_means[i], i))
            drops[best] = False
        for i in range(wp):
            keep[start + i] = not drops[i]
    return np.array(keep, dtype=bool)


def oracle_relevance(tokens, prompt_matrix, w_q, w_k):
    """Direct loop evaluation of the cross-modal relevance scores."""
    d = tokens.shape[1]
    tq = prompt_matrix @ w_q
    bk = tokens @ w_k
    logits = tq @ bk.T / math.sqrt(d)
    attn = np.zeros_like(logits)
    for j in range(logits.shape[0]):
        row = logits[j] - logits[j].max()
        e = np.exp(row)
        attn[j] = e / e.sum()
    r = attn.sum(axis=0) / logits.shape[0]
    return attn, r


def oracle_topk_positions(r, gamma, m_max):
    n = len(r)
    k = min(int(m_max), max(1, math.floor(gamma * n + 1e-9)))
    ranked = sorted(range(n), key=lambda i: (-r[i], i))
    return np.array(sorted(ranked[:k]), dtype=np.int64)


def oracle_neighbor_sims(tokens):
    sims = []
    for j in range(tokens.shape[0] - 1):
        a, b = tokens[j], tokens[j + 1]
        sims.append(float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b))))
    return np.array(sims)


def oracle_stage3_keep(tokens, theta):
    k = tokens.shape[0]
    if k == 1:
        return np.array([True])
    sims = oracle_neighbor_sims(tokens)
    keep = []
    maxs = []
    for j in range(k):
        avail = []
        if j > 0:
            avail.append(sims[j - 1])
        if j < k - 1:
            avail.append(sims[j])
        keep.append(min(avail) < theta)
        maxs.append(max(avail))
    if not any(keep):
        best = min(range(k), key=lambda j: (maxs[j], j))
        keep[best] = True
    return np.array(keep, dtype=bool)


def oracle_stage3_schedule(tokens, thresholds):
    """Retained row positions (into the input) after every pass."""
    positions = np.arange(tokens.shape[0])
    out = []
    current = tokens
    for theta in thresholds:
        keep = oracle_stage3_keep(current, theta)
        positions = positions[keep]
        current = current[keep]
        out.append(positions.copy())
    return out


# ---------------------------------------------------------------------------
# Instance builders
# ---------------------------------------------------------------------------


def hub_instance(rng, n, d=16, w=16):
    """Windows of spread tokens plus one or two 'hub' tokens on the shared
    direction. Hubs are the only structure whose window row-mean exceeds the
    mean-plus-std threshold, so these instances exercise the drop branch
    (cluster- or duplicate-only structure mathematically never fires it).
    """
    x = np.empty((n, d))
    for start in range(0, n, w):
        end = min(start + w, n)
        wp = end - start
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        u = basis[:, 0]
        c = rng.uniform(0.4, 0.6)
        spread = c * u[None, :] + math.sqrt(1 - c * c) * basis[:, 1:wp].T
        n_hub = int(rng.integers(1, 3)) if wp > 2 else 1
        block = np.vstack([np.tile(u, (n_hub, 1)), spread[: wp - n_hub]])
        block = block[rng.permutation(wp)]
        x[start:end] = block + 0.01 * rng.standard_normal((wp, d))
    return x


def planted_run_instance(rng, n, d, run_len=6, n_runs=4):
    """Random tokens with contiguous near-duplicate runs planted in them."""
    x = rng.standard_normal((n, d))
    for _ in range(n_runs):
        start = int(rng.integers(0, max(1, n - run_len)))
        base = rng.standard_normal(d)
        x[start:start + run_len] = base[None, :] + 1e-3 * rng.standard_normal((run_len, d))
    return x
