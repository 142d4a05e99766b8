"""Hot numeric kernels: windowed redundancy scan and neighbor-cosine scan.

Each kernel has a numba @njit implementation and a pure-numpy twin. The
active backend is chosen by the FOCUS_NUMBA env var ("0"/"false"/"off"
forces numpy; anything else, or unset, uses numba when importable).
FOCUS_THREADS caps the numba thread pool. `focusmil bench` times both paths.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


def numba_enabled() -> bool:
    flag = os.environ.get("FOCUS_NUMBA", "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False
    return HAS_NUMBA


def thread_cap() -> int:
    raw = os.environ.get("FOCUS_THREADS", "").strip()
    if raw.isdigit() and int(raw) > 0:
        return int(raw)
    return os.cpu_count() or 1


def configure_threads() -> int:
    """Apply the FOCUS_THREADS cap to numba; returns the thread count in use."""
    if not HAS_NUMBA:
        return 1
    n = max(1, min(thread_cap(), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _resolve(backend: str | None) -> str:
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


# ---------------------------------------------------------------------------
# Stage-1 kernel: per-window similarity statistics -> keep mask.
#
# Window rule: drop token i iff its mean similarity R_i exceeds mu + sigma of
# the window's full similarity matrix (diagonal included, population sigma).
# Guards: single-token trailing windows pass through; a window whose R values
# are all bit-identical is kept in full (R_i equals mu in real arithmetic, so
# sub-ulp rounding must not manufacture drops); if every token would drop,
# the lowest-R token (lowest index on ties) is kept.
# ---------------------------------------------------------------------------


def _window_mask_numpy(unit_rows: np.ndarray, w: int) -> np.ndarray:
    n = unit_rows.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for start in range(0, n, w):
        end = min(start + w, n)
        wp = end - start
        if wp < 2:
            continue
        blk = unit_rows[start:end]
        sim = blk @ blk.T
        row_mean = sim.mean(axis=1)
        if row_mean.max() == row_mean.min():
            continue
        mu = row_mean.mean()
        sigma = sim.std()
        drop = row_mean > mu + sigma
        if drop.all():
            drop[np.argmin(row_mean)] = False
        keep[start:end] = ~drop
    return keep


@njit(cache=True, parallel=True)
def _window_mask_numba(unit_rows, w, keep):  # pragma: no cover - jitted
    n, _d = unit_rows.shape
    nwin = (n + w - 1) // w
    for wi in prange(nwin):
        start = wi * w
        end = min(start + w, n)
        wp = end - start
        if wp < 2:
            for i in range(start, end):
                keep[i] = True
            continue
        blk = unit_rows[start:end]
        sim = np.dot(blk, blk.T)
        row_mean = np.empty(wp)
        for i in range(wp):
            rs = 0.0
            for j in range(wp):
                rs += sim[i, j]
            row_mean[i] = rs / wp
        rm_min = row_mean[0]
        rm_max = row_mean[0]
        mu_acc = 0.0
        for i in range(wp):
            mu_acc += row_mean[i]
            if row_mean[i] < rm_min:
                rm_min = row_mean[i]
            if row_mean[i] > rm_max:
                rm_max = row_mean[i]
        if rm_max == rm_min:
            for i in range(start, end):
                keep[i] = True
            continue
        mu = mu_acc / wp
        var_acc = 0.0
        for i in range(wp):
            for j in range(wp):
                dev = sim[i, j] - mu
                var_acc += dev * dev
        tau = mu + np.sqrt(var_acc / (wp * wp))
        kept_any = False
        for i in range(wp):
            if row_mean[i] > tau:
                keep[start + i] = False
            else:
                keep[start + i] = True
                kept_any = True
        if not kept_any:
            best = 0
            for i in range(1, wp):
                if row_mean[i] < row_mean[best]:
                    best = i
            keep[start + best] = True


def window_keep_mask(unit_rows: np.ndarray, w: int, backend: str | None = None) -> np.ndarray:
    """Keep mask for the windowed redundancy rule over unit-normalized rows."""
    unit_rows = np.ascontiguousarray(unit_rows, dtype=np.float64)
    if _resolve(backend) == "numpy":
        return _window_mask_numpy(unit_rows, w)
    configure_threads()
    keep = np.empty(unit_rows.shape[0], dtype=np.bool_)
    _window_mask_numba(unit_rows, w, keep)
    return keep


# ---------------------------------------------------------------------------
# Stage-3 kernel: cosine similarity between consecutive rows.
# ---------------------------------------------------------------------------


def _chain_cosine_numpy(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    dots = np.einsum("ij,ij->i", rows[:-1], rows[1:])
    return dots / (norms[:-1] * norms[1:])


@njit(cache=True, parallel=True)
def _chain_cosine_numba(rows):  # pragma: no cover - jitted
    n, d = rows.shape
    norms = np.empty(n)
    for i in prange(n):
        acc = 0.0
        for t in range(d):
            acc += rows[i, t] * rows[i, t]
        norms[i] = np.sqrt(acc)
    sims = np.empty(n - 1)
    for j in prange(n - 1):
        acc = 0.0
        for t in range(d):
            acc += rows[j, t] * rows[j + 1, t]
        sims[j] = acc / (norms[j] * norms[j + 1])
    return sims


def chain_cosine(rows: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Cosine similarity of each consecutive row pair; empty for a single row."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        return np.empty(0, dtype=np.float64)
    if _resolve(backend) == "numpy":
        return _chain_cosine_numpy(rows)
    configure_threads()
    return _chain_cosine_numba(rows)


def warmup() -> None:
    """Trigger JIT compilation so later timings are steady-state."""
    if not HAS_NUMBA:
        return
    x = np.random.default_rng(0).standard_normal((8, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    window_keep_mask(x, 4, backend="numba")
    chain_cosine(x, backend="numba")
