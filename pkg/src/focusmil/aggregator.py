"""Cross-modal aggregation, classification heads, and the end-to-end pipeline.

Two aggregation paths exist. The cross-attention path projects the prompt
matrix to queries and the compressed tokens to keys/values per head,
concatenates the head outputs, and layer-normalizes. The pooled path is the
baseline: gated attention pooling with a single attention vector, feeding
either a linear head or a prompt-similarity head.

Every forward returns a cache consumed by its backward twin; gradients
accumulate into the ParamStore. Token features never receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CompressionTrace, FeatureBag, PromptSet, RunConfig, rng_from
from .errors import ConfigError, ShapeMismatch
from .numerics import (
    ParamStore,
    Tensor2,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    row_softmax,
    row_softmax_backward,
)
from .prioritize import score_relevance, select_topk
from .redundancy import normalize_rows
from .seqcompress import StageSchedule, compress_stage
from . import kernels

INIT_STD = 0.02


def pool_hidden_dim(d: int) -> int:
    return min(d, 128)


def build_params(d: int, n_classes: int, config: RunConfig, rng=None) -> ParamStore:
    """Construct the ParamStore for the configured model variant.

    Cross-attention variants register per-head projections, the output
    projection, layer-norm affine terms, and the linear classifier. Pooled
    variants register the gated-pooling tensors and their head. Learnable
    prompt rows exist whenever prompts participate. When stage-2 selection
    runs without the cross-attention path, its shared head-0 projections are
    registered frozen (no gradient ever reaches them).

    Head 0's key projection is initialized to the same draw as its query
    projection, making the shared stage-2 bilinear form PSD at init so the
    initial relevance ranking already tracks prompt-token alignment.
    """
    if rng is None:
        rng = rng_from(config.seed, 3)
    flags = config.ablation
    params = ParamStore()
    dk = config.d_k(d)

    def normal(rows, cols):
        return rng.normal(0.0, INIT_STD, size=(rows, cols))

    uses_prompts = flags.crossagg or flags.kavtc or flags.prompt
    if uses_prompts and config.t2 > 0:
        params.register("t_learn", Tensor2(normal(config.t2, d), requires_grad=True))

    if flags.crossagg:
        if d % config.heads != 0:
            raise ConfigError(f"feature dim {d} not divisible by {config.heads} heads")
        for i in range(config.heads):
            w_q = normal(d, dk)
            w_k = w_q.copy() if i == 0 else normal(d, dk)
            params.register(f"head{i}.w_q", Tensor2(w_q, requires_grad=True))
            params.register(f"head{i}.w_k", Tensor2(w_k, requires_grad=True))
            params.register(f"head{i}.w_v", Tensor2(normal(d, dk), requires_grad=True))
        params.register("w_out", Tensor2(normal(config.heads * dk, d), requires_grad=True))
        params.register("ln.scale", Tensor2(np.ones((1, d)), requires_grad=True))
        params.register("ln.shift", Tensor2(np.zeros((1, d)), requires_grad=True))
        params.register("w_cls", Tensor2(normal(d, n_classes), requires_grad=True))
        params.register("b_cls", Tensor2(np.zeros((1, n_classes)), requires_grad=True))
    else:
        da = pool_hidden_dim(d)
        params.register("pool.v", Tensor2(normal(d, da), requires_grad=True))
        params.register("pool.u", Tensor2(normal(d, da), requires_grad=True))
        params.register("pool.w", Tensor2(normal(da, 1), requires_grad=True))
        if not flags.prompt:
            params.register("w_cls", Tensor2(normal(d, n_classes), requires_grad=True))
        params.register("b_cls", Tensor2(np.zeros((1, n_classes)), requires_grad=True))
        if flags.kavtc:
            # shared stage-2 projections; frozen because no gradient path exists
            w_q = normal(d, dk)
            params.register("head0.w_q", Tensor2(w_q, requires_grad=False))
            params.register("head0.w_k", Tensor2(w_q.copy(), requires_grad=False))
    return params


# ---------------------------------------------------------------------------
# Cross-modal attention aggregation
# ---------------------------------------------------------------------------


@dataclass
class AggregateCache:
    tokens: np.ndarray
    prompt_matrix: np.ndarray
    heads: list[tuple]  # per head: (q, k, v, p)
    concat: np.ndarray
    ln_cache: tuple


def aggregate(tokens: np.ndarray, prompt_matrix: np.ndarray, params: ParamStore,
              n_heads: int) -> tuple[np.ndarray, AggregateCache]:
    """Multi-head cross attention: prompts query the token sequence."""
    if tokens.shape[0] < 1:
        raise ShapeMismatch("aggregate needs at least one token")
    d = tokens.shape[1]
    if prompt_matrix.shape[1] != d:
        raise ShapeMismatch("prompt/token feature dims differ")
    dk = d // n_heads
    head_caches = []
    outputs = []
    for i in range(n_heads):
        q = matmul(prompt_matrix, params[f"head{i}.w_q"].data)
        k = matmul(tokens, params[f"head{i}.w_k"].data)
        v = matmul(tokens, params[f"head{i}.w_v"].data)
        p = row_softmax(matmul(q, k.T) / math.sqrt(dk))
        head_caches.append((q, k, v, p))
        outputs.append(matmul(p, v))
    concat = np.concatenate(outputs, axis=1)
    z = matmul(concat, params["w_out"].data)
    out, ln_cache = layer_norm(z, params["ln.scale"].data, params["ln.shift"].data)
    return out, AggregateCache(tokens, prompt_matrix, head_caches, concat, ln_cache)


def aggregate_backward(d_out: np.ndarray, cache: AggregateCache,
                       params: ParamStore, n_heads: int) -> np.ndarray:
    """Mirror of :func:`aggregate`; returns the prompt-matrix gradient."""
    d = cache.tokens.shape[1]
    dk = d // n_heads
    scale = 1.0 / math.sqrt(dk)
    d_z, d_scale, d_shift = layer_norm_backward(d_out, cache.ln_cache)
    params["ln.scale"].accumulate(d_scale.reshape(1, -1))
    params["ln.shift"].accumulate(d_shift.reshape(1, -1))
    d_concat, d_w_out = matmul_backward(d_z, cache.concat, params["w_out"].data)
    params["w_out"].accumulate(d_w_out)
    d_prompts = np.zeros_like(cache.prompt_matrix)
    for i in range(n_heads):
        q, k, v, p = cache.heads[i]
        d_head = d_concat[:, i * dk:(i + 1) * dk]
        d_p, d_v = matmul_backward(d_head, p, v)
        d_s = row_softmax_backward(d_p, p) * scale
        d_q = d_s @ k
        d_k = d_s.T @ q
        params[f"head{i}.w_q"].accumulate(cache.prompt_matrix.T @ d_q)
        params[f"head{i}.w_k"].accumulate(cache.tokens.T @ d_k)
        params[f"head{i}.w_v"].accumulate(cache.tokens.T @ d_v)
        d_prompts += d_q @ params[f"head{i}.w_q"].data.T
    return d_prompts


def classify(out_rows: np.ndarray, params: ParamStore) -> tuple[np.ndarray, tuple]:
    """Mean-pool the prompt-row axis, then the linear head."""
    pooled = out_rows.mean(axis=0, keepdims=True)
    logits = matmul(pooled, params["w_cls"].data) + params["b_cls"].data
    return logits.reshape(-1), (pooled, out_rows.shape[0])


def classify_backward(d_logits: np.ndarray, cache: tuple, params: ParamStore) -> np.ndarray:
    pooled, n_rows = cache
    d_row = d_logits.reshape(1, -1)
    params["b_cls"].accumulate(d_row)
    d_pooled, d_w = matmul_backward(d_row, pooled, params["w_cls"].data)
    params["w_cls"].accumulate(d_w)
    return np.repeat(d_pooled / n_rows, n_rows, axis=0)


# ---------------------------------------------------------------------------
# Baseline pooled aggregation (gated attention, single attention vector)
# ---------------------------------------------------------------------------


@dataclass
class PoolCache:
    tokens: np.ndarray
    hn: np.ndarray
    g: np.ndarray
    hg: np.ndarray
    alpha: np.ndarray


def attention_pool(tokens: np.ndarray, params: ParamStore) -> tuple[np.ndarray, PoolCache]:
    a1 = matmul(tokens, params["pool.v"].data)
    a2 = matmul(tokens, params["pool.u"].data)
    hn = np.tanh(a1)
    g = 1.0 / (1.0 + np.exp(-a2))
    hg = hn * g
    e = matmul(hg, params["pool.w"].data)  # n x 1
    alpha = row_softmax(e.T)  # 1 x n
    z = matmul(alpha, tokens)  # 1 x d
    return z, PoolCache(tokens, hn, g, hg, alpha)


def attention_pool_backward(d_z: np.ndarray, cache: PoolCache, params: ParamStore) -> None:
    d_alpha = d_z @ cache.tokens.T  # 1 x n
    d_e = row_softmax_backward(d_alpha, cache.alpha).T  # n x 1
    d_hg, d_w = matmul_backward(d_e, cache.hg, params["pool.w"].data)
    params["pool.w"].accumulate(d_w)
    d_a1 = d_hg * cache.g * (1.0 - cache.hn ** 2)
    d_a2 = d_hg * cache.hn * cache.g * (1.0 - cache.g)
    params["pool.v"].accumulate(cache.tokens.T @ d_a1)
    params["pool.u"].accumulate(cache.tokens.T @ d_a2)


def similarity_logits(z: np.ndarray, knowledge: np.ndarray,
                      params: ParamStore) -> tuple[np.ndarray, tuple]:
    """Prompt-similarity head: dot products against per-class text features.

    Class c's text feature is its knowledge prompt row plus the mean of the
    learnable prompt rows (when present). Requires one knowledge row per class.
    """
    n_classes = params["b_cls"].cols
    if knowledge.shape[0] != n_classes:
        raise ShapeMismatch(
            f"similarity head needs one knowledge prompt per class "
            f"({knowledge.shape[0]} rows for {n_classes} classes)"
        )
    if "t_learn" in params:
        shift = params["t_learn"].data.mean(axis=0, keepdims=True)
        cls_mat = knowledge + shift
    else:
        cls_mat = knowledge
    logits = matmul(z, cls_mat.T) + params["b_cls"].data
    return logits.reshape(-1), (z, cls_mat)


def similarity_logits_backward(d_logits: np.ndarray, cache: tuple,
                               params: ParamStore) -> np.ndarray:
    z, cls_mat = cache
    d_row = d_logits.reshape(1, -1)
    params["b_cls"].accumulate(d_row)
    if "t_learn" in params:
        t2 = params["t_learn"].rows
        d_shift = d_row.sum() * z  # d(sum_c l_c * z.cls_c)/d shift
        params["t_learn"].accumulate(np.repeat(d_shift / t2, t2, axis=0))
    return d_row @ cls_mat


def linear_logits(z: np.ndarray, params: ParamStore) -> tuple[np.ndarray, tuple]:
    logits = matmul(z, params["w_cls"].data) + params["b_cls"].data
    return logits.reshape(-1), (z,)


def linear_logits_backward(d_logits: np.ndarray, cache: tuple, params: ParamStore) -> np.ndarray:
    (z,) = cache
    d_row = d_logits.reshape(1, -1)
    params["b_cls"].accumulate(d_row)
    d_z, d_w = matmul_backward(d_row, z, params["w_cls"].data)
    params["w_cls"].accumulate(d_w)
    return d_z


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    logits: np.ndarray
    trace: CompressionTrace
    n_input: int
    cache: dict = field(repr=False, default_factory=dict)


def _prompt_matrix(prompts: PromptSet, params: ParamStore) -> np.ndarray:
    learnable = params["t_learn"].data if "t_learn" in params else np.zeros((0, prompts.d))
    return prompts.stacked(learnable)


def forward_pipeline(bag: FeatureBag, prompts: PromptSet | None, params: ParamStore,
                     config: RunConfig, backend: str | None = None) -> PipelineResult:
    """redundancy -> prioritize -> seqcompress -> aggregate -> classify.

    Ablation flags bypass stages (a bypassed stage is the identity on the
    sequence). ``prompts`` may be None only when no stage needs them.
    """
    flags = config.ablation
    if (flags.kavtc or flags.crossagg or flags.prompt) and prompts is None:
        raise ConfigError("this configuration requires a PromptSet")

    feats = np.asarray(bag.features, dtype=np.float64)
    positions = np.arange(bag.n)
    trace = CompressionTrace()
    prompt_matrix = _prompt_matrix(prompts, params) if prompts is not None else None

    if flags.kavtc:
        unit = normalize_rows(feats)
        keep = kernels.window_keep_mask(unit, config.w, backend=backend)
        positions = positions[keep]
        trace.add("redundancy", float("nan"), bag.patch_indices[positions])

        scores = score_relevance(
            feats[positions], prompt_matrix,
            params["head0.w_q"].data, params["head0.w_k"].data,
        )
        sel = select_topk(scores, config.gamma, config.m_max)
        positions = positions[sel.selected]
        trace.add("prioritize", config.gamma, bag.patch_indices[positions])

    if flags.svtc:
        schedule = StageSchedule.from_config(config.theta_base, config.delta_theta,
                                             config.n_stages)
        for i, theta in enumerate(schedule.thresholds):
            _, keep = compress_stage(feats[positions], theta, backend=backend)
            positions = positions[keep]
            trace.add(f"seqcompress{i}", theta, bag.patch_indices[positions])

    tokens = feats[positions]
    cache: dict = {"positions": positions}
    if flags.crossagg:
        out_rows, agg_cache = aggregate(tokens, prompt_matrix, params, config.heads)
        logits, cls_cache = classify(out_rows, params)
        cache.update(kind="crossagg", agg=agg_cache, cls=cls_cache)
    else:
        z, pool_cache = attention_pool(tokens, params)
        if flags.prompt:
            logits, head_cache = similarity_logits(z, prompts.knowledge, params)
            cache.update(kind="pooled_prompt", pool=pool_cache, head=head_cache)
        else:
            logits, head_cache = linear_logits(z, params)
            cache.update(kind="pooled_linear", pool=pool_cache, head=head_cache)
    return PipelineResult(logits=logits, trace=trace, n_input=bag.n, cache=cache)


def backward_pipeline(d_logits: np.ndarray, result: PipelineResult, params: ParamStore,
                      config: RunConfig) -> None:
    """Accumulate gradients for the trainable tensors of the forward pass.

    Hard selections (stage masks, top-k) are constants of the pass; the
    learnable prompts receive gradients only through the aggregation path.
    """
    cache = result.cache
    if cache["kind"] == "crossagg":
        d_out = classify_backward(d_logits, cache["cls"], params)
        d_prompts = aggregate_backward(d_out, cache["agg"], params, config.heads)
        if "t_learn" in params:
            params["t_learn"].accumulate(d_prompts[: params["t_learn"].rows])
        return
    if cache["kind"] == "pooled_prompt":
        d_z = similarity_logits_backward(d_logits, cache["head"], params)
    else:
        d_z = linear_logits_backward(d_logits, cache["head"], params)
    attention_pool_backward(d_z, cache["pool"], params)
