import hashlib
import json
import struct

import numpy as np
import pytest

from focusmil.core import FeatureBag, PromptSet, RunConfig, rng_from
from focusmil.dataio import (
    SynthSpec,
    convert_directory,
    generate_synthetic,
    load_checkpoint,
    make_synthetic_bag,
    read_bag,
    read_prompts,
    restore_params,
    save_checkpoint,
    synthesize,
    write_bag,
)
from focusmil.errors import BadMagic, NonFiniteValue, TruncatedFile
from oracles import oracle_stage3_schedule


def _random_bag(seed=0, n=17, d=5):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, d)).astype(np.float32)
    idx = np.sort(rng.choice(1000, size=n, replace=False))
    return FeatureBag("rt", feats, idx, label=1)


def test_bag_round_trip_bit_exact(tmp_path):
    bag = _random_bag()
    path = tmp_path / "a.fbag"
    write_bag(bag, path)
    loaded = read_bag(path, label=1)
    assert np.array_equal(loaded.features, bag.features.astype(np.float32))
    assert np.array_equal(loaded.patch_indices, bag.patch_indices)
    # writing the loaded bag reproduces the bytes exactly
    write_bag(loaded, tmp_path / "b.fbag")
    assert (tmp_path / "a.fbag").read_bytes() == (tmp_path / "b.fbag").read_bytes()


def test_bag_minimal_file(tmp_path):
    bag = FeatureBag("one", np.zeros((1, 512), dtype=np.float32), [0])
    write_bag(bag, tmp_path / "one.fbag")
    loaded = read_bag(tmp_path / "one.fbag")
    assert loaded.n == 1 and loaded.d == 512


def test_bag_truncated(tmp_path):
    bag = _random_bag()
    path = tmp_path / "t.fbag"
    write_bag(bag, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(TruncatedFile) as exc:
        read_bag(path)
    assert exc.value.offset == len(blob) - 7
    assert exc.value.expected == len(blob)


def test_bag_bad_magic(tmp_path):
    path = tmp_path / "bad.fbag"
    path.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(BadMagic):
        read_bag(path)


def test_bag_nonfinite_rejected(tmp_path):
    path = tmp_path / "nan.fbag"
    feats = np.array([[1.0, np.nan]], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQII", b"FBAG", 1, 1, 2, 0))
        fh.write(feats.tobytes())
        fh.write(np.array([0], dtype="<u8").tobytes())
    with pytest.raises(NonFiniteValue):
        read_bag(path)


def test_checkpoint_round_trip(tmp_path):
    from focusmil.aggregator import build_params

    cfg = RunConfig(heads=2, t2=1)
    params = build_params(8, 3, cfg, rng=rng_from(0, 3))
    meta = {"d": 8, "heads": 2, "d_k": 4, "t1": 3, "t2": 1, "n_classes": 3}
    path = tmp_path / "m.focp"
    save_checkpoint(path, params, meta)
    meta2, tensors = load_checkpoint(path)
    assert meta2 == meta
    assert set(tensors) == set(params.names())
    # float32 storage round trip
    for name in params.names():
        assert np.array_equal(tensors[name],
                              params[name].data.astype(np.float32).astype(np.float64))
    params2 = build_params(8, 3, cfg, rng=rng_from(9, 3))
    restore_params(params2, tensors)
    assert np.array_equal(params2["w_out"].data, tensors["w_out"])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.focp"
    path.write_bytes(b"XXXX" + b"\0" * 60)
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(signal_fraction=0.0)
    with pytest.raises(ValueError):
        SynthSpec(signal_fraction=0.001, n_tokens=100)  # rho*N < 1
    with pytest.raises(ValueError):
        SynthSpec(d=8, n_classes=5, n_background_centroids=8)


def _hash_tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_generator_deterministic(tmp_path):
    spec = SynthSpec(n_classes=2, bags_per_class=3, n_tokens=64, d=16,
                     signal_fraction=0.1, redundancy_run_len=8,
                     n_background_centroids=4, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")


def test_signal_separability_margin():
    spec = SynthSpec(n_classes=3, bags_per_class=2, n_tokens=128, d=32,
                     signal_fraction=0.1, redundancy_run_len=8,
                     n_background_centroids=4, seed=2)
    bags, signals, knowledge, _ = synthesize(spec)
    kn = knowledge / np.linalg.norm(knowledge, axis=1, keepdims=True)
    own, other = [], []
    for bag, pos in zip(bags, signals):
        sig = bag.features[pos]
        sig = sig / np.linalg.norm(sig, axis=1, keepdims=True)
        cos = sig @ kn.T
        own.append(cos[:, bag.label].mean())
        other.append(np.delete(cos, bag.label, axis=1).mean())
    assert np.mean(own) - np.mean(other) > 0.2


def test_sigma_zero_full_run_compression_matches_oracle():
    # one repeated background vector plus scattered signal tokens
    spec = SynthSpec(n_classes=2, bags_per_class=1, n_tokens=64, d=16,
                     signal_fraction=0.1, redundancy_run_len=64, noise_sigma=0.0,
                     n_background_centroids=4, seed=3)
    rng = rng_from(spec.seed, 11)
    from focusmil.dataio import _centroids

    cls_c, bg_c = _centroids(spec, rng)
    bag, _ = make_synthetic_bag(spec, 0, cls_c, bg_c, rng_from(spec.seed, 12, 0, 0), "b")
    from focusmil.seqcompress import StageSchedule, compress_stage

    sched = StageSchedule.from_config(0.7, 0.05, 3)
    positions = np.arange(bag.n)
    current = bag.features
    ref = oracle_stage3_schedule(bag.features, sched.thresholds)
    for theta, expected in zip(sched.thresholds, ref):
        _, keep = compress_stage(current, theta)
        positions = positions[keep]
        current = current[keep]
        assert positions.tolist() == expected.tolist()
    assert len(positions) < bag.n  # the duplicate run actually collapsed


def test_prompts_reuse_bag_format(tmp_path):
    k = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
    from focusmil.dataio import write_prompts

    write_prompts(k, tmp_path / "p.fbag")
    loaded = read_prompts(tmp_path / "p.fbag")
    assert np.array_equal(loaded, k.astype(np.float64))


def test_convert_directory(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rng = np.random.default_rng(1)
    labels = {}
    for i in range(6):
        mat = rng.standard_normal((10 + i, 7)).astype(np.float32)
        np.save(src / f"slide{i}.npy", mat)
        labels[f"slide{i}.npy"] = i % 2
    (src / "labels.json").write_text(json.dumps({
        "classes": ["neg", "pos"],
        "labels": labels,
        "splits": {f"slide{i}.npy": ("train" if i < 4 else ("val" if i == 4 else "test"))
                   for i in range(6)},
    }))
    manifest = convert_directory(src, tmp_path / "out")
    assert len(manifest.bags) == 6
    assert (tmp_path / "out" / "manifest.json").exists()
    bag = read_bag(manifest.resolve(manifest.bags[0]))
    assert bag.d == 7
    splits = {b.path: b.split for b in manifest.bags}
    assert splits["slide5.fbag"] == "test"


def test_convert_directory_dim_mismatch(tmp_path):
    src = tmp_path / "src2"
    src.mkdir()
    np.save(src / "a.npy", np.zeros((3, 4), dtype=np.float32))
    np.save(src / "b.npy", np.zeros((3, 5), dtype=np.float32))
    (src / "labels.json").write_text(json.dumps({
        "classes": ["x"], "labels": {"a.npy": 0, "b.npy": 0},
        "splits": {"a.npy": "train", "b.npy": "train"},
    }))
    with pytest.raises(ValueError, match="feature dim"):
        convert_directory(src, tmp_path / "out2")
