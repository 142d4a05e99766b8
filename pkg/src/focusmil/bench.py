"""Wall-clock benchmark of the compression stages, single vs parallel mode.

"single" runs the pure-numpy kernels; "parallel" runs the numba kernels
(threads capped by FOCUS_THREADS). Stage 2 is a BLAS matmul + softmax +
argsort with no numba twin, so both modes time the same code path there.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .prioritize import score_relevance, select_topk
from .seqcompress import compress_stage

DEFAULT_SIZES = (10_000, 50_000, 100_000)


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(sizes=DEFAULT_SIZES, d: int = 512, w: int = 32, gamma: float = 0.8,
              m_max: int = 4096, theta: float = 0.7, n_prompts: int = 8,
              repeats: int = 3, seed: int = 0) -> list[dict]:
    """Returns one row per (stage, N, mode) with the best-of wall time."""
    modes = [("single", "numpy")]
    if kernels.HAS_NUMBA:
        kernels.warmup()
        modes.append(("parallel", "numba"))

    rng = np.random.default_rng(seed)
    dk = max(1, d // 8)
    w_q = rng.normal(0.0, 0.02, size=(d, dk))
    w_k = rng.normal(0.0, 0.02, size=(d, dk))
    prompts = rng.standard_normal((n_prompts, d))

    rows = []
    for n in sizes:
        feats = rng.standard_normal((n, d))
        unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        for mode, backend in modes:
            t1 = _best_of(lambda: kernels.window_keep_mask(unit, w, backend=backend), repeats)
            rows.append({"stage": "redundancy", "n": n, "d": d, "mode": mode,
                         "backend": backend, "seconds": t1})
            t2 = _best_of(
                lambda: select_topk(score_relevance(feats, prompts, w_q, w_k), gamma, m_max),
                repeats)
            rows.append({"stage": "prioritize", "n": n, "d": d, "mode": mode,
                         "backend": "numpy", "seconds": t2})
            t3 = _best_of(lambda: compress_stage(feats, theta, backend=backend), repeats)
            rows.append({"stage": "seqcompress", "n": n, "d": d, "mode": mode,
                         "backend": backend, "seconds": t3})
    return rows
