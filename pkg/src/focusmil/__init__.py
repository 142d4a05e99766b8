"""Few-shot MIL over precomputed patch-feature bags: three-stage token
compression guided by text-prompt embeddings, cross-modal attention
aggregation, and a K-shot training/evaluation harness."""

from .core import (
    AblationFlags,
    CompressionTrace,
    DatasetManifest,
    FeatureBag,
    PromptSet,
    RunConfig,
)
from .dataio import SynthSpec, generate_synthetic, read_bag, write_bag

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "CompressionTrace",
    "DatasetManifest",
    "FeatureBag",
    "PromptSet",
    "RunConfig",
    "SynthSpec",
    "generate_synthetic",
    "read_bag",
    "write_bag",
    "__version__",
]
