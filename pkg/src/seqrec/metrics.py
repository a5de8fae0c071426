"""Ranked-retrieval metrics for single-target next-item evaluation.

With exactly one relevant item per user the ideal DCG is 1, so
NDCG@k = 1/log2(rank+1) inside the cut-off and HR@k equals Recall@k.
Per-user results are reduced with exact compensated summation
(math.fsum), making the mean independent of evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import EvalExample, encode_eval_batch
from .errors import DataError

PAD_TOKEN = 0


@dataclass
class EvalResult:
    ndcg_at_k: float
    hr_at_k: float
    recall_at_k: float
    k: int
    n_users: int

    def to_record(self, mechanism: str, dataset: str, split: str,
                  config_hash: str) -> dict:
        return {
            "mechanism": mechanism, "dataset": dataset, "split": split,
            "k": self.k, "ndcg": self.ndcg_at_k, "hr": self.hr_at_k,
            "recall": self.recall_at_k, "n_users": self.n_users,
            "config_hash": config_hash,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_record(**kw), sort_keys=True)


def rank_of_target(logits: np.ndarray, target: int, excluded: set[int]) -> int:
    """1-based rank of ``target`` among non-excluded items.

    Ties count against the target unless the tied item id is greater,
    matching the deterministic (-score, id) ordering of predict_next.
    """
    if target in excluded:
        raise DataError(f"target {target} is in the excluded set")
    logits = np.asarray(logits)
    scores = logits.copy()
    target_score = scores[target]
    mask = np.ones(len(scores), dtype=bool)
    for e in excluded:
        mask[e] = False
    mask[target] = False
    ids = np.arange(len(scores))
    better = mask & ((scores > target_score) |
                     ((scores == target_score) & (ids < target)))
    return 1 + int(better.sum())


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise DataError(f"rank and k must be >= 1, got rank={rank}, k={k}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise DataError(f"rank and k must be >= 1, got rank={rank}, k={k}")
    return 1.0 if rank <= k else 0.0


def evaluate_scores(score_fn, examples: list[EvalExample], k: int,
                    excluded: set[int]) -> EvalResult:
    """Evaluate any per-example scorer: score_fn(example) -> logits over items."""
    if not examples:
        raise DataError("cannot evaluate an empty split")
    ndcgs, hits = [], []
    for ex in examples:
        rank = rank_of_target(np.asarray(score_fn(ex)), ex.target, excluded)
        ndcgs.append(ndcg_at_k(rank, k))
        hits.append(hr_at_k(rank, k))
    n = len(examples)
    hr = math.fsum(hits) / n
    return EvalResult(math.fsum(ndcgs) / n, hr, hr, k, n)


def evaluate(model, examples: list[EvalExample], k: int = 10,
             batch_size: int = 256) -> EvalResult:
    """Full-catalog ranked evaluation of a model on a leave-one-out split.

    Candidates are every item token (PAD and MASK excluded, nothing
    else); the target's rank comes from the logits at the appended MASK
    position.
    """
    if not examples:
        raise DataError("cannot evaluate an empty split")
    cfg = model.config
    excluded = {PAD_TOKEN, cfg.mask_token}
    ndcgs, hits = [], []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = encode_eval_batch(chunk, cfg.max_len, cfg.mask_token)
        logits = model.forward(batch.tokens, train_mode=False).data[:, -1, :]
        for row, ex in zip(logits, chunk):
            rank = rank_of_target(row, ex.target, excluded)
            ndcgs.append(ndcg_at_k(rank, k))
            hits.append(hr_at_k(rank, k))
    n = len(examples)
    hr = math.fsum(hits) / n
    return EvalResult(math.fsum(ndcgs) / n, hr, hr, k, n)
