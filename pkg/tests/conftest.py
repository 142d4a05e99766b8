import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from focusmil.core import PromptSet, RunConfig
from focusmil.dataio import SynthSpec, generate_synthetic, read_prompts


SMALL_SPEC = SynthSpec(
    n_classes=3,
    bags_per_class=10,
    n_tokens=96,
    d=16,
    signal_fraction=0.1,
    redundancy_run_len=8,
    noise_sigma=0.1,
    n_background_centroids=4,
    seed=7,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny synthetic dataset for trainer/CLI tests."""
    out = tmp_path_factory.mktemp("small_synth")
    manifest, prompts_path = generate_synthetic(SMALL_SPEC, out)
    return manifest, prompts_path, SMALL_SPEC


@pytest.fixture(scope="session")
def small_prompts(small_dataset):
    manifest, prompts_path, spec = small_dataset
    knowledge = read_prompts(prompts_path)
    return PromptSet(knowledge, np.zeros((0, spec.d)), manifest.class_names)


@pytest.fixture()
def small_config():
    return RunConfig(k_shot=2, t2=2, heads=2, max_epochs=4, patience=2, n_folds=2, seed=1)
