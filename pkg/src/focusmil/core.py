"""Domain types, run configuration, deterministic RNG, and dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientShots, NonFiniteValue

SPLITS = ("train", "val", "test")


def rng_from(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for a named substream of ``seed``.

    Philox keyed through a SeedSequence spawn key, so every (seed, stream)
    pair maps to an independent, platform-stable stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class FeatureBag:
    """One slide's token sequence: an N x d feature matrix plus bookkeeping.

    ``patch_indices`` are positions in the original scan order and must be
    strictly increasing; they survive compression so retained tokens can be
    mapped back onto the slide.
    """

    id: str
    features: np.ndarray
    patch_indices: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        self.patch_indices = np.asarray(self.patch_indices, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.id}: features must be a nonempty 2-D matrix")
        if not np.isfinite(self.features).all():
            raise NonFiniteValue(f"bag {self.id}: non-finite feature values")
        if self.patch_indices.shape != (self.features.shape[0],):
            raise ValueError(f"bag {self.id}: patch_indices length mismatch")
        if self.n > 1 and not (np.diff(self.patch_indices) > 0).all():
            raise ValueError(f"bag {self.id}: patch_indices must be strictly increasing")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows: np.ndarray) -> "FeatureBag":
        """New bag restricted to ``rows`` (positions in the current sequence)."""
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureBag(
            id=self.id,
            features=self.features[rows],
            patch_indices=self.patch_indices[rows],
            label=self.label,
        )


@dataclass
class PromptSet:
    """Per-task text embeddings: frozen knowledge rows plus learnable rows.

    Concatenation order everywhere is [learnable; knowledge].
    """

    knowledge: np.ndarray
    learnable: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.knowledge = np.atleast_2d(np.asarray(self.knowledge, dtype=np.float64))
        self.learnable = np.asarray(self.learnable, dtype=np.float64)
        if self.learnable.size == 0:
            self.learnable = np.zeros((0, self.knowledge.shape[1]))
        if self.knowledge.shape[0] < 1:
            raise ValueError("need at least one knowledge prompt row")
        if self.learnable.shape[1] != self.knowledge.shape[1]:
            raise ValueError("learnable/knowledge prompt dims differ")

    @property
    def t1(self) -> int:
        return self.knowledge.shape[0]

    @property
    def t2(self) -> int:
        return self.learnable.shape[0]

    @property
    def d(self) -> int:
        return self.knowledge.shape[1]

    def stacked(self, learnable: np.ndarray | None = None) -> np.ndarray:
        """Full prompt matrix [learnable; knowledge]; ``learnable`` overrides."""
        rows = self.learnable if learnable is None else learnable
        if rows.shape[0] == 0:
            return self.knowledge
        return np.vstack([rows, self.knowledge])


@dataclass
class AblationFlags:
    """Stage switches for the cumulative ablation grid.

    ``prompt`` selects the text-similarity prediction head for the pooled
    (non cross-attention) model. ``kavtc`` runs compression stages 1+2,
    ``svtc`` stage 3, ``crossagg`` the cross-modal attention aggregator.
    """

    prompt: bool = True
    kavtc: bool = True
    svtc: bool = True
    crossagg: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    """Every pipeline knob in one place."""

    w: int = 32
    gamma: float = 0.8
    m_max: int = 4096
    theta_base: float = 0.7
    delta_theta: float = 0.05
    n_stages: int = 3
    heads: int = 8
    t2: int = 2
    k_shot: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    max_epochs: int = 80
    patience: int = 10
    n_folds: int = 10
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self, d: int | None = None) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.theta_base + self.n_stages * self.delta_theta > 1.0 + 1e-12:
            raise ConfigError("theta_base + n_stages*delta_theta must be <= 1")
        if self.m_max < 1:
            raise ConfigError("m_max must be >= 1")
        if self.w < 2:
            raise ConfigError("window size must be >= 2")
        if self.n_stages < 1:
            raise ConfigError("need at least one sequential compression stage")
        if self.k_shot < 1:
            raise ConfigError("k_shot must be >= 1")
        if self.t2 < 0:
            raise ConfigError("t2 must be >= 0")
        if d is not None and d % self.heads != 0:
            raise ConfigError(f"feature dim {d} not divisible by {self.heads} heads")

    def d_k(self, d: int) -> int:
        return d // self.heads

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablation"] = self.ablation.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        flags = raw.pop("ablation", {})
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(flags, dict):
            bad = set(flags) - {f.name for f in AblationFlags.__dataclass_fields__.values()}  # type: ignore[attr-defined]
            if bad:
                raise ConfigError(f"unknown ablation keys: {sorted(bad)}")
            flags = AblationFlags(**flags)
        return cls(**raw, ablation=flags)


@dataclass
class StageRecord:
    stage_name: str
    threshold_used: float
    retained_original_indices: np.ndarray

    def __post_init__(self):
        self.retained_original_indices = np.asarray(
            self.retained_original_indices, dtype=np.int64
        )


class CompressionTrace:
    """Per-stage record of retained original indices, for oracles and reports."""

    def __init__(self):
        self.stage_records: list[StageRecord] = []

    def add(self, stage_name: str, threshold: float, retained: np.ndarray) -> None:
        rec = StageRecord(stage_name, float(threshold), retained)
        idx = rec.retained_original_indices
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise ValueError(f"stage {stage_name}: retained indices not strictly increasing")
        if self.stage_records:
            prev = self.stage_records[-1].retained_original_indices
            if not np.isin(idx, prev).all():
                raise ValueError(
                    f"stage {stage_name}: retained indices are not a subset of the previous stage"
                )
        self.stage_records.append(rec)

    def ratios(self, n_input: int) -> list[float]:
        """Retained/input fraction per stage."""
        out = []
        prev = n_input
        for rec in self.stage_records:
            n = len(rec.retained_original_indices)
            out.append(n / prev if prev else 1.0)
            prev = n
        return out

    def to_dict(self, n_input: int) -> dict:
        return {
            "stages": [
                {
                    "stage_name": rec.stage_name,
                    "threshold_used": None if math.isnan(rec.threshold_used) else rec.threshold_used,
                    "retained_original_indices": rec.retained_original_indices.tolist(),
                    "retained": int(len(rec.retained_original_indices)),
                }
                for rec in self.stage_records
            ],
            "input_length": int(n_input),
            "stage_ratios": self.ratios(n_input),
        }


@dataclass
class BagRef:
    path: str
    label: int
    split: str


class DatasetManifest:
    """JSON-backed index of feature files, labels, and split assignment.

    Paths are stored relative to the manifest's directory; labels live here
    so one feature file can serve many split schemes.
    """

    def __init__(self, bags: list[BagRef], class_names: list[str], d: int,
                 base_dir: Path | None = None):
        self.bags = bags
        self.class_names = list(class_names)
        self.d = int(d)
        self.base_dir = Path(base_dir) if base_dir is not None else Path(".")
        self._check()

    def _check(self) -> None:
        n_classes = len(self.class_names)
        for b in self.bags:
            if b.split not in SPLITS:
                raise ConfigError(f"bad split {b.split!r} for {b.path}")
            if not (0 <= b.label < n_classes):
                raise ConfigError(f"label {b.label} out of range for {b.path}")
        train_labels = {b.label for b in self.bags if b.split == "train"}
        if self.bags and train_labels != set(range(n_classes)):
            missing = sorted(set(range(n_classes)) - train_labels)
            raise ConfigError(f"classes {missing} have no train bags")

    def split_bags(self, split: str) -> list[BagRef]:
        return [b for b in self.bags if b.split == split]

    def resolve(self, ref: BagRef) -> Path:
        return self.base_dir / ref.path

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "classes": self.class_names,
            "bags": [{"path": b.path, "label": b.label, "split": b.split} for b in self.bags],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        bags = [BagRef(b["path"], int(b["label"]), b["split"]) for b in raw["bags"]]
        return cls(bags, raw["classes"], int(raw["d"]), base_dir=path.parent)

    def with_splits(self, assignment: dict[str, str]) -> "DatasetManifest":
        bags = [BagRef(b.path, b.label, assignment[b.path]) for b in self.bags]
        return DatasetManifest(bags, self.class_names, self.d, base_dir=self.base_dir)


def sample_k_shot(manifest: DatasetManifest, k: int, seed: int) -> list[str]:
    """Pick exactly k train bag paths per class, without replacement."""
    rng = rng_from(seed, 7)  # fixed substream, distinct from fold derivation
    picked: list[str] = []
    for label in range(len(manifest.class_names)):
        pool = sorted(b.path for b in manifest.bags if b.split == "train" and b.label == label)
        if len(pool) < k:
            raise InsufficientShots(label, len(pool), k)
        chosen = rng.choice(len(pool), size=k, replace=False)
        picked.extend(pool[i] for i in sorted(chosen))
    return picked


def assign_splits(paths_by_label: dict[int, list[str]], rng: np.random.Generator,
                  val_frac: float = 0.2, test_frac: float = 0.2) -> dict[str, str]:
    """Stratified split assignment: floor for val/test, remainder to train."""
    assignment: dict[str, str] = {}
    for label in sorted(paths_by_label):
        paths = sorted(paths_by_label[label])
        order = rng.permutation(len(paths))
        n = len(paths)
        n_val = math.floor(val_frac * n)
        n_test = math.floor(test_frac * n)
        for pos, idx in enumerate(order):
            if pos < n_val:
                split = "val"
            elif pos < n_val + n_test:
                split = "test"
            else:
                split = "train"
            assignment[paths[idx]] = split
    return assignment


def make_folds(manifest: DatasetManifest, n_folds: int, seed: int,
               val_frac: float = 0.2, test_frac: float = 0.2) -> list[DatasetManifest]:
    """n_folds independent stratified resamplings of the same bag pool."""
    if n_folds < 1:
        raise ConfigError("n_folds must be >= 1")
    by_label: dict[int, list[str]] = {}
    for b in manifest.bags:
        by_label.setdefault(b.label, []).append(b.path)
    folds = []
    for fold in range(n_folds):
        rng = rng_from(seed, 1, fold)
        assignment = assign_splits(by_label, rng, val_frac, test_frac)
        folds.append(manifest.with_splits(assignment))
    return folds
