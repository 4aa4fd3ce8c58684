"""Top-K ranking metrics (P@K, R@K, NDCG@K) under the IID/OOD protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelParams
from .dataset import InteractionSet, SplitSpec


def score_matrix(params: ModelParams, content: np.ndarray, users=None) -> np.ndarray:
    """Scores of every item for ``users`` (all users by default)."""
    users = np.arange(params.p_t.shape[0]) if users is None else np.asarray(users)
    return params.p_t[users] @ params.t.T + params.p_f[users] @ (params.W @ content.T)


def rank_topk(scores, K: int, exclude=()) -> list[int]:
    """Items by descending score, ascending id on ties, excluded ids removed before truncation."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.size, dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    keep[excl] = False
    cand = np.flatnonzero(keep)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:K]].tolist()


def precision_at_k(ranked, relevant, K: int) -> float:
    hits = sum(1 for i in ranked[:K] if i in relevant)
    return hits / K


def recall_at_k(ranked, relevant, K: int) -> float:
    if not relevant:
        raise ValueError("recall undefined without relevant items")
    hits = sum(1 for i in ranked[:K] if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, K: int) -> float:
    if not relevant:
        raise ValueError("ndcg undefined without relevant items")
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(ranked[:K]) if i in relevant)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(K, len(relevant))))
    return float(dcg / idcg)


@dataclass
class RankingResult:
    K: int
    ranked: dict = field(default_factory=dict)
    per_user: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.per_user)

    def macro(self) -> dict[str, float]:
        if not self.per_user:
            return {"precision": 0.0, "recall": 0.0, "ndcg": 0.0}
        vals = np.array([self.per_user[u] for u in sorted(self.per_user)])
        p, r, n = vals.mean(axis=0)
        return {"precision": float(p), "recall": float(r), "ndcg": float(n)}


def evaluate_split(scores: np.ndarray, train: InteractionSet, test: InteractionSet, K: int) -> RankingResult:
    """Macro-averaged metrics over users with at least one test positive."""
    seen = train.items_by_user()
    relevant = test.items_by_user()
    res = RankingResult(K)
    for u in range(test.num_users):
        if not relevant[u]:
            continue
        ranked = rank_topk(scores[u], K, np.fromiter(seen[u], dtype=np.int64))
        res.ranked[u] = ranked
        res.per_user[u] = (precision_at_k(ranked, relevant[u], K),
                           recall_at_k(ranked, relevant[u], K),
                           ndcg_at_k(ranked, relevant[u], K))
    return res


def evaluate(model, split: SplitSpec, K: int = 10) -> dict[str, dict[str, float]]:
    """``model`` is ``(params, content)`` or a precomputed (num_users x num_items) score matrix."""
    if isinstance(model, tuple):
        scores = score_matrix(*model)
    else:
        scores = np.asarray(model)
    return {
        "iid": evaluate_split(scores, split.train, split.test_iid, K).macro(),
        "ood": evaluate_split(scores, split.train, split.test_ood, K).macro(),
    }


def write_metrics(table: dict, K: int, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for split in ("iid", "ood"):
            for metric in ("precision", "recall", "ndcg"):
                fh.write(f"{split}\t{metric}\t{K}\t{table[split][metric]:.6f}\n")


def read_metrics(path) -> dict:
    out: dict = {}
    for line in open(path, encoding="utf-8").read().splitlines():
        if line:
            split, metric, K, value = line.split("\t")
            out.setdefault(split, {})[metric] = float(value)
    return out
