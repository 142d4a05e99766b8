"""K-shot training loop, fold orchestration, and the ablation grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregator import build_params, backward_pipeline, forward_pipeline
from .core import DatasetManifest, FeatureBag, PromptSet, RunConfig, rng_from, sample_k_shot
from .dataio import load_bag
from .errors import NonFiniteLoss
from .kernels import thread_cap
from .metrics import EvalBatch, auc, balanced_accuracy, macro_f1
from .numerics import AdamW, ParamStore, cross_entropy, log_softmax

ABLATION_VARIANTS = [
    ("BaseMIL", dict(prompt=False, kavtc=False, svtc=False, crossagg=False)),
    ("+Prompt", dict(prompt=True, kavtc=False, svtc=False, crossagg=False)),
    ("+KAVTC", dict(prompt=True, kavtc=True, svtc=False, crossagg=False)),
    ("+SVTC", dict(prompt=True, kavtc=True, svtc=True, crossagg=False)),
    ("+CrossAgg", dict(prompt=True, kavtc=True, svtc=True, crossagg=True)),
]


def derive_seed(master: int, *stream: int) -> int:
    """Stable 64-bit child seed for a named substream."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


class EarlyStopper:
    """Strict-improvement tracker: stop after `patience` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record an epoch's metric; returns True when the run should stop."""
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    best_val_metric: float = -math.inf
    epochs_since_improve: int = 0
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict, repr=False)


@dataclass
class FoldResult:
    fold_index: int
    metrics: dict
    stage_ratios: dict
    epochs_run: int
    best_epoch: int
    best_val_metric: float
    params_snapshot: dict = field(repr=False, default_factory=dict)
    param_meta: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "metrics": self.metrics,
            "stage_ratios": self.stage_ratios,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val_metric,
        }


def evaluate(bags: list[FeatureBag], prompts: PromptSet | None, params: ParamStore,
             config: RunConfig) -> tuple[EvalBatch, dict]:
    """Forward every bag; returns the prob/label batch and mean per-stage
    retention ratios."""
    probs = []
    labels = []
    ratio_sums: dict[str, float] = {}
    for bag in bags:
        result = forward_pipeline(bag, prompts, params, config)
        probs.append(np.exp(log_softmax(result.logits)))
        labels.append(bag.label)
        for rec, ratio in zip(result.trace.stage_records, result.trace.ratios(result.n_input)):
            ratio_sums[rec.stage_name] = ratio_sums.get(rec.stage_name, 0.0) + ratio
    stage_ratios = {k: v / len(bags) for k, v in ratio_sums.items()}
    return EvalBatch(np.array(probs), np.array(labels)), stage_ratios


def _metric_dict(batch: EvalBatch) -> dict:
    return {
        "balanced_acc": balanced_accuracy(batch),
        "auc": auc(batch),
        "f1": macro_f1(batch),
    }


def train_one_fold(manifest: DatasetManifest, prompts: PromptSet | None, config: RunConfig,
                   fold_index: int = 0,
                   bag_cache: dict[str, FeatureBag] | None = None) -> FoldResult:
    """Train on K shots per class, early-stop on validation balanced accuracy,
    evaluate the best checkpoint on the test split."""

    def get_bag(ref):
        if bag_cache is not None and ref.path in bag_cache:
            bag = bag_cache[ref.path]
            if bag.label != ref.label:
                bag = FeatureBag(bag.id, bag.features, bag.patch_indices, label=ref.label)
            return bag
        return load_bag(manifest, ref)

    shot_seed = derive_seed(config.seed, 5, fold_index)
    shot_paths = set(sample_k_shot(manifest, config.k_shot, shot_seed))
    train_bags = [get_bag(b) for b in manifest.split_bags("train") if b.path in shot_paths]
    val_bags = [get_bag(b) for b in manifest.split_bags("val")]
    test_bags = [get_bag(b) for b in manifest.split_bags("test")]

    d = manifest.d
    n_classes = len(manifest.class_names)
    config.validate(d if config.ablation.crossagg else None)
    params = build_params(d, n_classes, config, rng=rng_from(config.seed, 3, fold_index))
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    stopper = EarlyStopper(config.patience)
    state = TrainState()
    epochs_run = 0
    for epoch in range(config.max_epochs):
        order = rng_from(config.seed, 4, fold_index, epoch).permutation(len(train_bags))
        for i in order:
            bag = train_bags[i]
            result = forward_pipeline(bag, prompts, params, config)
            loss, d_logits = cross_entropy(result.logits, bag.label)
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"fold {fold_index}, epoch {epoch}, bag {bag.id}: loss={loss}")
            backward_pipeline(d_logits, result, params, config)
            opt.step()
        epochs_run = epoch + 1
        val_batch, _ = evaluate(val_bags, prompts, params, config)
        val_metric = balanced_accuracy(val_batch)
        improved = val_metric > stopper.best
        stop = stopper.update(val_metric, epoch)
        if improved:
            state.best_params = params.snapshot()
            state.best_val_metric = val_metric
            state.best_epoch = epoch
        state.epoch = epoch
        state.epochs_since_improve = stopper.stale
        if stop:
            break

    params.restore(state.best_params)
    test_batch, stage_ratios = evaluate(test_bags, prompts, params, config)
    meta = {
        "d": d, "heads": config.heads, "d_k": config.d_k(d),
        "t1": prompts.t1 if prompts is not None else 0, "t2": config.t2,
        "n_classes": n_classes,
    }
    return FoldResult(
        fold_index=fold_index,
        metrics=_metric_dict(test_batch),
        stage_ratios=stage_ratios,
        epochs_run=epochs_run,
        best_epoch=state.best_epoch,
        best_val_metric=state.best_val_metric,
        params_snapshot=params.snapshot(),
        param_meta=meta,
    )


def _summary(folds: list[FoldResult]) -> dict:
    out = {}
    for key in ("balanced_acc", "auc", "f1"):
        vals = np.array([f.metrics[key] for f in folds])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def _run_fold_job(args) -> FoldResult:
    # spawn-context worker: bags are (re)loaded from disk, nothing shared
    fold_manifest, prompts, config, fold_index = args
    return train_one_fold(fold_manifest, prompts, config, fold_index, None)


def run_experiment(manifest: DatasetManifest, prompts: PromptSet | None, config: RunConfig,
                   n_folds: int | None = None, folds: list[DatasetManifest] | None = None,
                   bag_cache: dict[str, FeatureBag] | None = None,
                   n_workers: int | None = None) -> dict:
    """Train/evaluate over independently resampled folds; deterministic in the
    master seed regardless of worker count.

    Fold workers use spawn (numba's threading layer is not fork-safe) and
    read feature files themselves, so parallel mode needs an on-disk dataset.
    """
    from .core import make_folds

    if n_folds is None:
        n_folds = config.n_folds
    if folds is None:
        folds = make_folds(manifest, n_folds, config.seed)
    if n_workers is None:
        n_workers = min(thread_cap(), len(folds))

    if n_workers > 1 and len(folds) > 1:
        import multiprocessing as mp

        jobs = [(fold, prompts, config, i) for i, fold in enumerate(folds)]
        with mp.get_context("spawn").Pool(n_workers) as pool:
            results = pool.map(_run_fold_job, jobs)
    else:
        if bag_cache is None:
            bag_cache = {b.path: load_bag(manifest, b) for b in manifest.bags}
        results = [train_one_fold(fold, prompts, config, i, bag_cache)
                   for i, fold in enumerate(folds)]

    return {
        "config": config.to_dict(),
        "n_folds": n_folds,
        "folds": [r.to_dict() for r in results],
        "summary": _summary(results),
        "_fold_results": results,
    }


def run_ablation(manifest: DatasetManifest, prompts: PromptSet | None, config: RunConfig,
                 n_folds: int | None = None,
                 bag_cache: dict[str, FeatureBag] | None = None) -> dict:
    """Run the five cumulative variants on identical folds."""
    from dataclasses import replace

    from .core import AblationFlags, make_folds

    if n_folds is None:
        n_folds = config.n_folds
    folds = make_folds(manifest, n_folds, config.seed)
    if bag_cache is None:
        bag_cache = {b.path: load_bag(manifest, b) for b in manifest.bags}

    variants = []
    for name, flags in ABLATION_VARIANTS:
        v_config = replace(config, ablation=AblationFlags(**flags))
        v_prompts = prompts if (flags["prompt"] or flags["kavtc"] or flags["crossagg"]) else None
        report = run_experiment(manifest, v_prompts, v_config, n_folds=n_folds,
                                folds=folds, bag_cache=bag_cache)
        variants.append({
            "variant": name,
            "flags": flags,
            "summary": report["summary"],
            "folds": report["folds"],
        })
    return {"config": config.to_dict(), "n_folds": n_folds, "variants": variants}
