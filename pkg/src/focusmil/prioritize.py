"""Stage 2: language-guided token prioritization.

Cross-modal attention scores between the prompt matrix and the surviving
tokens produce one relevance value per token; the top fraction (capped at a
maximum sequence length) is kept, re-sorted to scan order.

Selection is a hard top-k and therefore non-differentiable; the projection
matrices used here are shared with the aggregator's first attention head so
they keep training through that path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import PromptSet
from .numerics import matmul, row_softmax


@dataclass
class RelevanceScores:
    attention: np.ndarray  # (t1+t2) x N', rows sum to 1
    relevance: np.ndarray  # N', column means of attention


@dataclass
class SelectionResult:
    k: int
    selected: np.ndarray  # positions into the scored sequence, ascending


def score_relevance(tokens: np.ndarray, prompts, w_q: np.ndarray,
                    w_k: np.ndarray) -> RelevanceScores:
    """Relevance of each token: softmax over tokens of projected prompt-token
    products (scaled by 1/sqrt(d)), averaged over prompt rows."""
    prompt_matrix = prompts.stacked() if isinstance(prompts, PromptSet) else np.asarray(prompts)
    d = tokens.shape[1]
    logits = matmul(matmul(prompt_matrix, w_q), matmul(tokens, w_k).T) / math.sqrt(d)
    attention = row_softmax(logits)
    return RelevanceScores(attention, attention.mean(axis=0))


def select_topk(scores: RelevanceScores, gamma: float, m_max: int) -> SelectionResult:
    """Keep the top k = min(m_max, max(1, floor(gamma*N'))) tokens by relevance.

    Rank ties break toward the lower index; the selection is re-sorted to
    ascending sequence order so downstream neighbor logic sees scan order.
    """
    r = scores.relevance
    n = r.shape[0]
    # +1e-9 absorbs float error in gamma*n when the exact product is integral
    k = min(int(m_max), max(1, math.floor(gamma * n + 1e-9)))
    order = np.lexsort((np.arange(n), -r))
    selected = np.sort(order[:k])
    return SelectionResult(k=k, selected=selected)
