"""Feature-bag and checkpoint file formats, synthetic data, real-data ingest.

Bag file layout (all little-endian):
    header  magic "FBAG" | version u32 | N u64 | d u32 | flags u32   (24 bytes)
    body    N*d float32, row-major
    footer  N patch indices, u64

Checkpoint layout:
    header  magic "FOCP" | version u32 | d,h,d_k,t1,t2,S as u32      (32 bytes)
    count   u32
    tensors sorted by name: name_len u32 | name utf-8 | rows u32 |
            cols u32 | rows*cols float32, row-major

Features are stored at 32-bit; all computation upstream runs at 64-bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BagRef, DatasetManifest, FeatureBag, assign_splits, rng_from
from .errors import BadMagic, NonFiniteValue, TruncatedFile
from .numerics import ParamStore

BAG_MAGIC = b"FBAG"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sIQII")

CKPT_MAGIC = b"FOCP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIII")


def write_bag(bag: FeatureBag, path: str | Path) -> None:
    path = Path(path)
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    idx = np.ascontiguousarray(bag.patch_indices, dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(_BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.n, bag.d, 0))
        fh.write(feats.tobytes())
        fh.write(idx.tobytes())


def read_bag(path: str | Path, label: int | None = None) -> FeatureBag:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _BAG_HEADER.size:
        raise TruncatedFile(str(path), len(blob), _BAG_HEADER.size)
    magic, version, n, d, _flags = _BAG_HEADER.unpack_from(blob)
    if magic != BAG_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise BadMagic(f"{path}: empty bag (N={n}, d={d})")
    expected = _BAG_HEADER.size + 4 * n * d + 8 * n
    if len(blob) != expected:
        raise TruncatedFile(str(path), len(blob), expected)
    off = _BAG_HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    idx = np.frombuffer(blob, dtype="<u8", count=n, offset=off).astype(np.int64)
    if not np.isfinite(feats).all():
        raise NonFiniteValue(f"{path}: non-finite feature values")
    return FeatureBag(id=path.stem, features=feats.copy(), patch_indices=idx, label=label)


def load_bag(manifest: DatasetManifest, ref: BagRef) -> FeatureBag:
    return read_bag(manifest.resolve(ref), label=ref.label)


def write_prompts(knowledge: np.ndarray, path: str | Path) -> None:
    """Prompt embeddings reuse the bag format (one row per knowledge prompt)."""
    knowledge = np.atleast_2d(knowledge)
    bag = FeatureBag(id="prompts", features=knowledge,
                     patch_indices=np.arange(knowledge.shape[0]))
    write_bag(bag, path)


def read_prompts(path: str | Path) -> np.ndarray:
    return read_bag(path).features.astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors, meta: dict) -> None:
    """``tensors``: ParamStore or mapping name -> 2-D array.
    ``meta`` needs d, heads, d_k, t1, t2, n_classes."""
    if isinstance(tensors, ParamStore):
        tensors = tensors.snapshot()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(
            CKPT_MAGIC, CKPT_VERSION, meta["d"], meta["heads"], meta["d_k"],
            meta["t1"], meta["t2"], meta["n_classes"],
        ))
        names = sorted(tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.atleast_2d(np.asarray(tensors[name]))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _CKPT_HEADER.size + 4:
        raise TruncatedFile(str(path), len(blob), _CKPT_HEADER.size + 4)
    magic, version, d, heads, d_k, t1, t2, n_classes = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    meta = {"d": d, "heads": heads, "d_k": d_k, "t1": t1, "t2": t2, "n_classes": n_classes}
    off = _CKPT_HEADER.size
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise TruncatedFile(str(path), len(blob), off + 4)
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = 4 * rows * cols
        if off + nbytes > len(blob):
            raise TruncatedFile(str(path), len(blob), off + nbytes)
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
            .reshape(rows, cols).astype(np.float64)
        )
        off += nbytes
    return meta, tensors


def restore_params(params: ParamStore, tensors: dict[str, np.ndarray]) -> None:
    for name, values in tensors.items():
        if name in params:
            params[name].data[...] = values


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for the desk-scale synthetic task.

    Each bag mixes a small fraction of class-signal tokens (near that class's
    centroid) into a background of contiguous near-duplicate runs drawn from
    centroids shared across classes. Knowledge prompts sit at the class
    centroids plus noise, so language guidance is informative by construction.
    """

    n_classes: int = 5
    bags_per_class: int = 40
    n_tokens: int = 2048
    d: int = 64
    signal_fraction: float = 0.05
    redundancy_run_len: int = 16
    noise_sigma: float = 0.1
    n_background_centroids: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.signal_fraction < 1.0):
            raise ValueError("signal_fraction must lie in (0,1)")
        if self.signal_fraction * self.n_tokens < 1:
            raise ValueError("signal_fraction * n_tokens must be >= 1")
        if self.d < self.n_classes + self.n_background_centroids + 1:
            raise ValueError("d too small to orthogonalize class and background centroids")
        if self.redundancy_run_len < 1:
            raise ValueError("redundancy_run_len must be >= 1")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


JITTER = 1e-3


def _centroids(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal class centroids; background centroids share a common
    direction (pairwise cosine ~0.6) and are orthogonal to every class."""
    need = spec.n_classes + spec.n_background_centroids + 1
    basis, _ = np.linalg.qr(rng.standard_normal((spec.d, need)))
    classes = basis[:, : spec.n_classes].T
    shared = basis[:, spec.n_classes]
    rest = basis[:, spec.n_classes + 1:].T
    bg = shared[None, :] + 0.8 * rest
    bg /= np.linalg.norm(bg, axis=1, keepdims=True)
    return classes, bg


def make_synthetic_bag(spec: SynthSpec, label: int, class_centroids: np.ndarray,
                       bg_centroids: np.ndarray, rng, bag_id: str) -> tuple[FeatureBag, np.ndarray]:
    """Build one bag; returns it plus the planted signal positions."""
    n = spec.n_tokens
    n_signal = math.ceil(spec.signal_fraction * n)
    signal_pos = np.sort(rng.choice(n, size=n_signal, replace=False))
    feats = np.empty((n, spec.d))

    is_signal = np.zeros(n, dtype=bool)
    is_signal[signal_pos] = True
    feats[signal_pos] = class_centroids[label] + spec.noise_sigma * rng.standard_normal(
        (n_signal, spec.d))

    bg_slots = np.flatnonzero(~is_signal)
    filled = 0
    while filled < bg_slots.size:
        run = min(spec.redundancy_run_len, bg_slots.size - filled)
        centroid = bg_centroids[rng.integers(len(bg_centroids))]
        base = centroid + spec.noise_sigma * rng.standard_normal(spec.d)
        block = base[None, :] + JITTER * rng.standard_normal((run, spec.d))
        feats[bg_slots[filled:filled + run]] = block
        filled += run

    bag = FeatureBag(id=bag_id, features=feats, patch_indices=np.arange(n), label=label)
    return bag, signal_pos


def synthesize(spec: SynthSpec):
    """In-memory dataset: (bags, signal positions per bag, knowledge prompts,
    class names)."""
    rng = rng_from(spec.seed, 11)
    class_centroids, bg_centroids = _centroids(spec, rng)
    knowledge = class_centroids + spec.noise_sigma * rng.standard_normal(class_centroids.shape)
    bags = []
    signals = []
    for label in range(spec.n_classes):
        for b in range(spec.bags_per_class):
            bag_rng = rng_from(spec.seed, 12, label, b)
            bag_id = f"bag_{label:02d}_{b:03d}"
            bag, pos = make_synthetic_bag(spec, label, class_centroids, bg_centroids,
                                          bag_rng, bag_id)
            bags.append(bag)
            signals.append(pos)
    class_names = [f"class_{c}" for c in range(spec.n_classes)]
    return bags, signals, knowledge, class_names


def generate_synthetic(spec: SynthSpec, out_dir: str | Path):
    """Write bags, prompt embeddings, signal positions, and a 6:2:2 manifest.

    Deterministic: the same spec always produces hash-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bags, signals, knowledge, class_names = synthesize(spec)

    refs = []
    by_label: dict[int, list[str]] = {}
    signal_map = {}
    for bag, pos in zip(bags, signals):
        fname = f"{bag.id}.fbag"
        write_bag(bag, out_dir / fname)
        refs.append((fname, bag.label))
        by_label.setdefault(bag.label, []).append(fname)
        signal_map[fname] = pos.tolist()

    split_rng = rng_from(spec.seed, 13)
    assignment = assign_splits(by_label, split_rng)
    manifest = DatasetManifest(
        [BagRef(fname, label, assignment[fname]) for fname, label in refs],
        class_names, spec.d, base_dir=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    write_prompts(knowledge, out_dir / "prompts.fbag")
    (out_dir / "signal_positions.json").write_text(
        json.dumps(signal_map, sort_keys=True, indent=0) + "\n")
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return manifest, out_dir / "prompts.fbag"


# ---------------------------------------------------------------------------
# Real-data ingest
# ---------------------------------------------------------------------------


def convert_directory(src_dir: str | Path, out_dir: str | Path, seed: int = 0) -> DatasetManifest:
    """Convert a directory of per-slide 2-D float32 .npy matrices into bag
    files plus a manifest.

    ``labels.json`` sidecar: {"classes": [...], "labels": {"file.npy": int},
    "splits": {"file.npy": "train"}} — splits optional; missing splits are
    assigned stratified 6:2:2 from the seed.
    """
    src_dir = Path(src_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = json.loads((src_dir / "labels.json").read_text())
    classes = sidecar["classes"]
    labels = sidecar["labels"]
    splits = sidecar.get("splits")

    d = None
    refs = []
    by_label: dict[int, list[str]] = {}
    for fname in sorted(labels):
        mat = np.load(src_dir / fname)
        if mat.ndim != 2:
            raise ValueError(f"{fname}: expected a 2-D matrix, got shape {mat.shape}")
        mat = mat.astype(np.float32)
        if d is None:
            d = mat.shape[1]
        elif mat.shape[1] != d:
            raise ValueError(f"{fname}: feature dim {mat.shape[1]} != {d}")
        label = int(labels[fname])
        bag = FeatureBag(id=Path(fname).stem, features=mat,
                         patch_indices=np.arange(mat.shape[0]), label=label)
        out_name = Path(fname).stem + ".fbag"
        write_bag(bag, out_dir / out_name)
        refs.append((out_name, label, fname))
        by_label.setdefault(label, []).append(out_name)

    if splits is not None:
        assignment = {out_name: splits[orig] for out_name, _, orig in refs}
    else:
        assignment = assign_splits(by_label, rng_from(seed, 17))
    manifest = DatasetManifest(
        [BagRef(out_name, label, assignment[out_name]) for out_name, label, _ in refs],
        classes, d, base_dir=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
