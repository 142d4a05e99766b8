import math

import numpy as np
import pytest

from focusmil.core import FeatureBag
from focusmil.errors import ZeroNormRow
from focusmil.redundancy import WindowStats, normalize_rows, remove_global_redundancy
from oracles import hub_instance, oracle_stage1_keep, planted_run_instance


def _bag(features):
    return FeatureBag("t", features, np.arange(features.shape[0]))


def test_normalize_rows_triangle():
    out = normalize_rows(np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[0.6, 0.8]], atol=1e-12)


def test_normalize_rows_idempotent():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6))
    once = normalize_rows(x)
    assert np.abs(normalize_rows(once) - once).max() < 1e-12


def test_normalize_rows_unit_norms():
    x = np.random.default_rng(1).standard_normal((5, 7))
    norms = np.linalg.norm(normalize_rows(x), axis=1)
    assert np.abs(norms - 1.0).max() < 1e-9


def test_normalize_rows_zero_row():
    x = np.ones((3, 4))
    x[1] = 0.0
    with pytest.raises(ZeroNormRow) as exc:
        normalize_rows(x)
    assert exc.value.index == 1


def test_identical_window_fully_kept():
    # mu=1, sigma=0, tau=1, all R=1: strict ">" keeps everything
    x = np.tile(np.array([0.1, 0.2, 0.7]), (8, 1))
    out, record = remove_global_redundancy(_bag(x), w=8)
    assert out.n == 8
    assert record.retained_original_indices.tolist() == list(range(8))


def test_orthogonal_window_closed_form():
    w = 6
    x = np.eye(w)
    stats = WindowStats.from_block(normalize_rows(x))
    assert abs(stats.mu - 1 / w) < 1e-12
    assert abs(stats.sigma - math.sqrt(w - 1) / w) < 1e-12
    assert stats.tau_g == stats.mu + stats.sigma
    assert np.abs(stats.mean_sim - 1 / w).max() < 1e-12
    out, _ = remove_global_redundancy(_bag(x), w=w)
    assert out.n == w  # every R_i = 1/w < tau


def test_window_stats_invariants():
    rng = np.random.default_rng(2)
    blk = normalize_rows(rng.standard_normal((10, 5)))
    stats = WindowStats.from_block(blk)
    assert np.abs(stats.similarities - stats.similarities.T).max() < 1e-12
    assert np.abs(np.diag(stats.similarities) - 1.0).max() < 1e-6


def test_trailing_window_of_one_passes_through():
    rng = np.random.default_rng(3)
    x = hub_instance(rng, 33, d=16, w=16)  # last window has a single token
    out, _ = remove_global_redundancy(_bag(x), w=16)
    assert 32 in out.patch_indices  # the lone trailing token survives


@pytest.mark.parametrize("seed", range(12))
def test_oracle_equivalence_hub_instances(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 13)) * 16
    x = hub_instance(rng, n, d=16, w=16)
    out, _ = remove_global_redundancy(_bag(x), w=16)
    ref = oracle_stage1_keep(x, 16)
    assert out.patch_indices.tolist() == np.flatnonzero(ref).tolist()


@pytest.mark.parametrize("seed", range(8))
def test_oracle_equivalence_planted_duplicate_runs(seed):
    rng = np.random.default_rng(100 + seed)
    x = planted_run_instance(rng, 128, 8, run_len=6, n_runs=5)
    out, _ = remove_global_redundancy(_bag(x), w=32)
    ref = oracle_stage1_keep(x, 32)
    assert out.patch_indices.tolist() == np.flatnonzero(ref).tolist()


def test_hub_instances_exercise_the_drop_branch():
    # guards the oracle tests against becoming vacuous
    dropped = 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 13)) * 16
        x = hub_instance(rng, n, d=16, w=16)
        out, _ = remove_global_redundancy(_bag(x), w=16)
        dropped += x.shape[0] - out.n
    assert dropped > 0


def test_output_is_subsequence():
    rng = np.random.default_rng(5)
    x = hub_instance(rng, 96, d=16, w=16)
    out, _ = remove_global_redundancy(_bag(x), w=16)
    assert (np.diff(out.patch_indices) > 0).all()
    assert out.n <= x.shape[0]


def test_window_locality():
    # permuting tokens in other windows never changes an untouched window
    rng = np.random.default_rng(6)
    w = 16
    x = hub_instance(rng, 4 * w, d=16, w=w)
    base, _ = remove_global_redundancy(_bag(x), w=w)
    base_first = set(base.patch_indices[base.patch_indices < w].tolist())

    perm = np.arange(4 * w)
    perm[w:] = w + rng.permutation(3 * w)  # shuffle everything after window 0
    shuffled = x[perm]
    out, _ = remove_global_redundancy(_bag(shuffled), w=w)
    first = set(out.patch_indices[out.patch_indices < w].tolist())
    assert first == base_first


@pytest.mark.parametrize("seed", range(6))
def test_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    x = hub_instance(rng, 64, d=16, w=16)
    scaled = x * rng.uniform(0.1, 10.0, size=(64, 1))  # positive per-token rescale
    a, _ = remove_global_redundancy(_bag(x), w=16)
    b, _ = remove_global_redundancy(_bag(scaled), w=16)
    assert a.patch_indices.tolist() == b.patch_indices.tolist()


def test_window_size_validation():
    with pytest.raises(ValueError):
        remove_global_redundancy(_bag(np.ones((4, 2))), w=1)
