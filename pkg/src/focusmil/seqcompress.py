"""Stage 3: sequential compression by neighbor-cosine thresholding.

Runs a schedule of passes with increasing thresholds. In each pass a token
is kept iff the minimum cosine similarity to its surviving neighbors falls
below the pass threshold; endpoints use their single neighbor. Similarities
are recomputed each pass on the now-adjacent survivors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ZeroNormRow
from .redundancy import ZERO_NORM_EPS


@dataclass
class StageSchedule:
    thresholds: list[float]

    def __post_init__(self):
        t = self.thresholds
        if not t:
            raise ValueError("schedule needs at least one threshold")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {t}")
        if t[0] <= 0.0 or t[-1] > 1.0:
            raise ValueError(f"thresholds must lie in (0, 1], got {t}")

    @classmethod
    def from_config(cls, theta_base: float, delta_theta: float, n_stages: int) -> "StageSchedule":
        # rounding keeps decimal inputs producing decimal thresholds
        # (0.7 + 2*0.05 is 0.7999999999999999 in floats)
        return cls([round(theta_base + i * delta_theta, 12) for i in range(n_stages)])


def neighbor_similarities(tokens: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Cosine similarity of consecutive token pairs; empty for one token."""
    tokens = np.asarray(tokens, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", tokens, tokens))
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return kernels.chain_cosine(tokens, backend=backend)


def stage_keep_mask(sims: np.ndarray, n_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (min, max) over the available neighbor similarities."""
    mins = np.empty(n_tokens)
    maxs = np.empty(n_tokens)
    mins[0] = maxs[0] = sims[0]
    mins[-1] = maxs[-1] = sims[-1]
    if n_tokens > 2:
        mins[1:-1] = np.minimum(sims[:-1], sims[1:])
        maxs[1:-1] = np.maximum(sims[:-1], sims[1:])
    return mins, maxs


def compress_stage(tokens: np.ndarray, theta: float,
                   backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One pass: returns (surviving tokens, boolean keep mask).

    A single-token input is kept unconditionally. If the threshold rule
    would drop everything, the token whose maximum neighbor similarity is
    minimal is kept (ties toward the lower index).
    """
    n = tokens.shape[0]
    if n == 1:
        return tokens, np.ones(1, dtype=bool)
    sims = neighbor_similarities(tokens, backend=backend)
    mins, maxs = stage_keep_mask(sims, n)
    keep = mins < theta
    if not keep.any():
        keep[np.argmin(maxs)] = True
    return tokens[keep], keep


def compress_sequential(tokens: np.ndarray, schedule: StageSchedule,
                        backend: str | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run every pass of the schedule; returns the final tokens plus each
    pass's keep mask (relative to that pass's input)."""
    masks = []
    current = tokens
    for theta in schedule.thresholds:
        current, keep = compress_stage(current, theta, backend=backend)
        masks.append(keep)
    return current, masks
