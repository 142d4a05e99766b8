"""Command-line surface: experiments, benchmarks, and diagnostics.

Runs are driven by a flat JSON config (RunConfig fields plus "manifest" and
"prompts" path entries) with dotted-key --set overrides. Every command that
produces artifacts echoes the fully resolved config into its output
directory, and re-running from that echo reproduces the outputs.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import dataio, kernels
from .aggregator import build_params, backward_pipeline, forward_pipeline
from .core import DatasetManifest, PromptSet, RunConfig, rng_from
from .errors import ConfigError, FocusError
from .metrics import balanced_accuracy
from .numerics import cross_entropy, grad_check
from .trainer import evaluate, format_cell, run_ablation, run_experiment

PATH_KEYS = ("manifest", "prompts")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(cfg: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set key {key!r} indexes into a non-object")
        node[parts[-1]] = _parse_value(raw)
    return cfg


def _resolve_config(args) -> tuple[RunConfig, dict]:
    cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = json.loads(path.read_text())
    _apply_overrides(cfg, getattr(args, "set", None))
    paths = {k: cfg.pop(k, None) for k in PATH_KEYS}
    for k in PATH_KEYS:
        override = getattr(args, k, None)
        if override:
            paths[k] = override
    run = RunConfig.from_dict(cfg)
    return run, paths


def _load_manifest(paths: dict) -> DatasetManifest:
    raw = paths.get("manifest")
    if not raw:
        raise ConfigError("no manifest path given (config key 'manifest' or --manifest)")
    path = Path(raw)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _load_prompts(paths: dict, manifest: DatasetManifest, config: RunConfig) -> PromptSet | None:
    flags = config.ablation
    needed = flags.prompt or flags.kavtc or flags.crossagg
    raw = paths.get("prompts")
    if raw is None:
        if needed:
            raise ConfigError("this configuration needs prompt embeddings "
                              "(config key 'prompts' or --prompts)")
        return None
    path = Path(raw)
    if not path.exists():
        raise ConfigError(f"prompt file not found: {path}")
    knowledge = dataio.read_prompts(path)
    return PromptSet(knowledge, np.zeros((0, knowledge.shape[1])), manifest.class_names)


def _echo_config(out_dir: Path, config: RunConfig, paths: dict, extra: dict | None = None):
    doc = dict(config.to_dict())
    for k, v in paths.items():
        if v is not None:
            doc[k] = str(Path(v).resolve())
    if extra:
        doc.update(extra)
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _bar_chart(path: Path, group_labels: list[str], series: dict[str, list[float]],
               title: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(6, len(group_labels) * 0.9), 4))
    x = np.arange(len(group_labels))
    width = 0.8 / max(1, len(series))
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + i * width, values, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels(group_labels, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "focusmil"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _apply_overrides({}, args.set)
    spec = dataio.SynthSpec(**cfg)
    out_dir = Path(args.out)
    manifest, prompts_path = dataio.generate_synthetic(spec, out_dir)
    print(f"wrote {len(manifest.bags)} bags, manifest, and prompts under {out_dir}")
    return 0


def cmd_train(args) -> int:
    config, paths = _resolve_config(args)
    manifest = _load_manifest(paths)
    prompts = _load_prompts(paths, manifest, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, config, paths)

    report = run_experiment(manifest, prompts, config)
    fold_results = report.pop("_fold_results")
    _dump_json(out_dir / "report.json", report)

    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "balanced_acc", "auc", "f1"])
        for fold in report["folds"]:
            m = fold["metrics"]
            writer.writerow([fold["fold_index"], m["balanced_acc"], m["auc"], m["f1"]])
        s = report["summary"]
        writer.writerow(["mean±std",
                         format_cell(**s["balanced_acc"]),
                         format_cell(**s["auc"]),
                         format_cell(**s["f1"])])

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for r in fold_results:
        dataio.save_checkpoint(ckpt_dir / f"fold_{r.fold_index:02d}.focp",
                               r.params_snapshot, r.param_meta)

    labels = [f"fold {f['fold_index']}" for f in report["folds"]]
    series = {k: [f["metrics"][k] for f in report["folds"]]
              for k in ("balanced_acc", "auc", "f1")}
    _bar_chart(out_dir / "metrics.png", labels, series, "per-fold test metrics", "score")

    s = report["summary"]
    for key in ("balanced_acc", "auc", "f1"):
        print(f"{key}: {format_cell(**s[key])}")
    return 0


def cmd_eval(args) -> int:
    config, paths = _resolve_config(args)
    manifest = _load_manifest(paths)
    prompts = _load_prompts(paths, manifest, config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    meta, tensors = dataio.load_checkpoint(ckpt)
    params = build_params(manifest.d, len(manifest.class_names), config,
                          rng=rng_from(config.seed, 3, 0))
    dataio.restore_params(params, tensors)

    test_bags = [dataio.load_bag(manifest, b) for b in manifest.split_bags("test")]
    batch, stage_ratios = evaluate(test_bags, prompts, params, config)
    from .trainer import _metric_dict

    doc = {"metrics": _metric_dict(batch), "stage_ratios": stage_ratios,
           "n_test_bags": len(test_bags), "checkpoint": str(ckpt.resolve())}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, config, paths, extra={"checkpoint": str(ckpt.resolve())})
    _dump_json(out_dir / "eval.json", doc)
    for k, v in doc["metrics"].items():
        print(f"{k}: {v:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config, paths = _resolve_config(args)
    manifest = _load_manifest(paths)
    prompts = _load_prompts(paths, manifest, replace(config))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, config, paths)

    table = run_ablation(manifest, prompts, config)
    _dump_json(out_dir / "ablation.json", table)

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "balanced_acc", "auc", "f1"])
        for v in table["variants"]:
            s = v["summary"]
            writer.writerow([v["variant"],
                             format_cell(**s["balanced_acc"]),
                             format_cell(**s["auc"]),
                             format_cell(**s["f1"])])

    labels = [v["variant"] for v in table["variants"]]
    series = {"balanced_acc": [v["summary"]["balanced_acc"]["mean"] for v in table["variants"]]}
    _bar_chart(out_dir / "ablation.png", labels, series, "cumulative variants",
               "balanced accuracy")

    for v in table["variants"]:
        print(f"{v['variant']:>10}: {format_cell(**v['summary']['balanced_acc'])}")
    return 0


def cmd_compress(args) -> int:
    config, paths = _resolve_config(args)
    bag_path = Path(args.bag)
    if not bag_path.exists():
        raise ConfigError(f"bag file not found: {bag_path}")
    bag = dataio.read_bag(bag_path)

    prompts = None
    raw = paths.get("prompts")
    if raw is not None:
        knowledge = dataio.read_prompts(Path(raw))
        prompts = PromptSet(knowledge, np.zeros((0, knowledge.shape[1])),
                            [str(i) for i in range(knowledge.shape[0])])
    flags = config.ablation
    if (flags.kavtc or flags.crossagg) and prompts is None:
        raise ConfigError("compression with stage 2 needs --prompts")

    params = build_params(bag.d, len(prompts.class_names) if prompts else 2, config,
                          rng=rng_from(config.seed, 3, 0))
    if args.checkpoint:
        _, tensors = dataio.load_checkpoint(args.checkpoint)
        dataio.restore_params(params, tensors)

    result = forward_pipeline(bag, prompts, params, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, config, paths, extra={"bag": str(bag_path.resolve())})
    doc = result.trace.to_dict(result.n_input)
    doc["bag_id"] = bag.id
    _dump_json(out_dir / "trace.json", doc)
    for rec, ratio in zip(doc["stages"], doc["stage_ratios"]):
        print(f"{rec['stage_name']:>14}: kept {rec['retained']:>6} ratio {ratio:.4f}")
    return 0


def cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = bench_mod.run_bench(sizes=sizes, d=args.d, repeats=args.repeats)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stage", "n", "d", "mode", "backend", "seconds"])
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"{r['stage']:>12} n={r['n']:>7} {r['mode']:>8} ({r['backend']}): "
              f"{r['seconds']:.4f}s")
    return 0


def cmd_gradcheck(args) -> int:
    config, _ = _resolve_config(args)
    report = pipeline_grad_check(config, tolerance=args.tolerance).report
    worst = report.by_param()
    for name in sorted(worst):
        status = "ok" if worst[name] < report.tolerance else "FAIL"
        print(f"{name:>16}: max rel err {worst[name]:.3e} [{status}]")
    print(f"overall: {'PASS' if report.passed else 'FAIL'} "
          f"(worst {report.worst():.3e}, tol {report.tolerance:g})")
    return 0 if report.passed else 1


def cmd_convert(args) -> int:
    src = Path(args.src)
    if not src.exists():
        raise ConfigError(f"source directory not found: {src}")
    if not (src / "labels.json").exists():
        raise ConfigError(f"sidecar not found: {src / 'labels.json'}")
    manifest = dataio.convert_directory(src, args.out, seed=args.seed)
    print(f"converted {len(manifest.bags)} bags into {args.out}")
    return 0


class GradCheckRun:
    """Result bundle: the report plus exactly what was checked."""

    def __init__(self, report, params, config, n_compressed):
        self.report = report
        self.params = params
        self.config = config
        self.n_compressed = n_compressed


def pipeline_grad_check(config: RunConfig | None = None, tolerance: float = 1e-4,
                        n_classes: int = 3, d: int = 16, n_tokens: int = 10,
                        seed: int = 0) -> GradCheckRun:
    """Finite-difference check of the full pipeline on a small synthetic bag."""
    from .core import FeatureBag

    if config is None:
        config = RunConfig()
    config = replace(config, heads=min(config.heads, max(1, d // 2)), t2=max(config.t2, 1))
    if d % config.heads:
        config = replace(config, heads=2)
    rng = rng_from(seed, 99)
    feats = rng.standard_normal((n_tokens, d))
    bag = FeatureBag("gradcheck", feats, np.arange(n_tokens), label=1)
    knowledge = rng.standard_normal((n_classes, d))
    prompts = PromptSet(knowledge, np.zeros((0, d)), [str(i) for i in range(n_classes)])
    params = build_params(d, n_classes, config, rng=rng_from(seed, 3))

    def closure() -> float:
        result = forward_pipeline(bag, prompts, params, config)
        loss, d_logits = cross_entropy(result.logits, bag.label)
        backward_pipeline(d_logits, result, params, config)
        return loss

    report = grad_check(closure, params, tolerance=tolerance, seed=seed)
    n_compressed = len(forward_pipeline(bag, prompts, params, config).cache["positions"])
    return GradCheckRun(report, params, config, n_compressed)


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key config override (repeatable)")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--prompts", help="prompt-embedding file path")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focusmil",
                                     description="few-shot MIL with token compression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="SynthSpec field override")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="K-shot training over folds")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the cumulative ablation grid")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("compress", help="write the compression trace for one bag")
    _add_common(p)
    p.add_argument("--bag", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("bench", help="time the compression kernels")
    p.add_argument("--sizes", default="10000,50000,100000")
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("convert", help="ingest per-slide .npy matrices + labels.json")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "kind": "config"}), file=sys.stderr)
        return 2
    except FocusError as exc:
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
