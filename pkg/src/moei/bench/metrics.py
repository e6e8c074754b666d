"""Scoring: exact-match accuracy and token-level Rouge-L, plus greedy evaluation."""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..backbone import Backbone, generate_batch
from ..data import EOS, TaskSample
from ..errors import ContractError

METRICS = ("accuracy", "rouge_l")


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length, bit-parallel over positions of ``a``."""
    m = len(a)
    if m == 0 or len(b) == 0:
        return 0
    match: Dict = {}
    for i, tok in enumerate(a):
        match[tok] = match.get(tok, 0) | (1 << i)
    full = (1 << m) - 1
    v = full
    for tok in b:
        u = v & match.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return m - bin(v).count("1")


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = 1.2) -> float:
    """Rouge-L F-measure; ``beta`` weights recall over precision.

    Two empty sequences score 1.0; exactly one empty sequence scores 0.0.
    """
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def score_predictions(predictions: Sequence[Sequence[int]], samples: Sequence[TaskSample], metric: str) -> float:
    if not samples:
        raise ContractError("cannot evaluate an empty sample set")
    if len(predictions) != len(samples):
        raise ContractError("one prediction per sample is required")
    if metric == "accuracy":
        scores = [tuple(p) == s.target for p, s in zip(predictions, samples)]
    elif metric == "rouge_l":
        scores = [rouge_l(list(p), list(s.target)) for p, s in zip(predictions, samples)]
    else:
        raise ContractError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return float(np.mean(scores))


def predict(model: Backbone, sites, samples: Sequence[TaskSample], max_new: Optional[int] = None) -> List[List[int]]:
    """Greedy answers (EOS stripped), decoding equal-length prompts together."""
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        groups[len(s.prompt)].append(i)
    out: List[List[int]] = [[] for _ in samples]
    was_training = getattr(sites, "training", False)
    if sites is not None:
        sites.eval()
    try:
        for idxs in groups.values():
            budget = max_new if max_new is not None else max(len(samples[i].target) for i in idxs) + 1
            prompts = np.array([samples[i].prompt for i in idxs])
            for i, new in zip(idxs, generate_batch(model, prompts, budget, sites, eos_id=EOS)):
                out[i] = new[:-1] if new and new[-1] == EOS else new
    finally:
        if sites is not None:
            sites.train(was_training)
    return out


def evaluate(model: Backbone, sites, samples: Sequence[TaskSample], metric: str) -> float:
    """Metric of greedy generations against targets (accuracy or Rouge-L F)."""
    if not samples:
        raise ContractError("cannot evaluate an empty sample set")
    return score_predictions(predict(model, sites, samples), samples, metric)
