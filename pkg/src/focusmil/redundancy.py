"""Stage 1: global redundancy removal via sliding-window similarity statistics.

The bag is cut into consecutive non-overlapping windows of size w (the
trailing remainder window is processed if it holds >= 2 tokens, passed
through untouched otherwise). Within each window, tokens whose mean cosine
similarity to the window exceeds the window's mean-plus-std threshold are
dropped. Scoring uses unit-normalized copies; the original features flow on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import FeatureBag, StageRecord
from .errors import ZeroNormRow

ZERO_NORM_EPS = 1e-12


def normalize_rows(features: np.ndarray) -> np.ndarray:
    """Unit-L2-normalize each row; rows with norm < 1e-12 are an error."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", features, features))
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return features / norms[:, None]


@dataclass
class WindowStats:
    """Similarity statistics for one window (diagnostic surface)."""

    similarities: np.ndarray
    mu: float
    sigma: float
    tau_g: float
    mean_sim: np.ndarray

    @classmethod
    def from_block(cls, unit_block: np.ndarray) -> "WindowStats":
        sim = unit_block @ unit_block.T
        mean_sim = sim.mean(axis=1)
        mu = float(mean_sim.mean())
        sigma = float(sim.std())
        return cls(sim, mu, sigma, mu + sigma, mean_sim)


def remove_global_redundancy(bag: FeatureBag, w: int,
                             backend: str | None = None) -> tuple[FeatureBag, StageRecord]:
    """Apply the windowed redundancy filter; returns the reduced bag and a
    trace record of the retained original patch indices."""
    if w < 2:
        raise ValueError(f"window size must be >= 2, got {w}")
    unit = normalize_rows(bag.features)
    keep = kernels.window_keep_mask(unit, w, backend=backend)
    rows = np.flatnonzero(keep)
    out = bag.take(rows)
    record = StageRecord("redundancy", float("nan"), out.patch_indices)
    return out, record
