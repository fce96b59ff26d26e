"""Unsampled (full-catalog) ranking and leave-one-out metrics.

Ranks are 1-based.  An item outranks the target when its score is strictly
greater, or equal with a smaller item index.  Items in the exclusion set
(by default the user's history, never the target itself) are skipped.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .losses import probabilities

TIE_RULE = "ascending item index"


def rank_target(scores: np.ndarray, target: int, exclude: Iterable[int] = (),
                n_items: Optional[int] = None) -> int:
    """Rank of ``target`` (1-based item index) among non-excluded items.

    ``scores[j]`` is the score of item ``j + 1`` and must cover the catalog.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n_items is not None and scores.shape[-1] != n_items:
        raise ValueError(f"scores cover {scores.shape[-1]} items, catalog has {n_items}")
    exclude = set(int(e) for e in exclude)
    if target in exclude:
        raise ValueError(f"target {target} is in the exclusion set")
    if not 1 <= target <= len(scores):
        raise IndexError(f"target {target} outside 1..{len(scores)}")
    allowed = np.ones(len(scores), dtype=bool)
    ex = np.fromiter((e - 1 for e in exclude if 1 <= e <= len(scores)), dtype=np.int64)
    allowed[ex] = False
    t = scores[target - 1]
    above = (scores > t) | ((scores == t) & (np.arange(len(scores)) < target - 1))
    return int(1 + np.count_nonzero(above & allowed))


def rank_targets(scores: np.ndarray, targets: np.ndarray, exclusions: Sequence[Iterable[int]]) -> np.ndarray:
    """Vectorised :func:`rank_target` over rows of ``scores``."""
    U, V = scores.shape
    allowed = np.ones((U, V), dtype=bool)
    for u, ex in enumerate(exclusions):
        ex = np.fromiter((e for e in ex if e != targets[u]), dtype=np.int64)
        allowed[u, ex - 1] = False
    t = scores[np.arange(U), targets - 1][:, None]
    cols = np.arange(V)[None, :]
    above = (scores > t) | ((scores == t) & (cols < targets[:, None] - 1))
    return 1 + np.count_nonzero(above & allowed, axis=1)


def top_k(scores: np.ndarray, k: int, exclusions: Optional[Sequence[Iterable[int]]] = None) -> np.ndarray:
    """Top-``k`` 1-based item indices per row under the same ordering as ranking.

    Excluded items sort after every allowed item, so they only appear when a
    row has fewer than ``k`` allowed items.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if exclusions is not None:
        for u, ex in enumerate(exclusions):
            ex = np.fromiter(ex, dtype=np.int64)
            scores[u, ex - 1] = -np.inf
    k = min(k, scores.shape[1])
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for u, row in enumerate(scores):
        part = np.argpartition(-row, k - 1)[:k] if k < len(row) else np.arange(len(row))
        # widen to every item tied with the k-th score so index tie-breaking is exact
        kth = row[part].min()
        cand = np.flatnonzero(row >= kth)
        order = np.lexsort((cand, -row[cand]))
        out[u] = cand[order][:k] + 1
    return out


def recall_at_k(rank, k: int):
    if k < 1:
        raise ValueError("K must be >= 1")
    r = np.asarray(rank)
    out = (r <= k).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def ndcg_at_k(rank, k: int):
    if k < 1:
        raise ValueError("K must be >= 1")
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def precision_at_k_curve(ranks, k_max: int = 100) -> np.ndarray:
    """Mean over users of (1[rank <= K] / K) for K = 1..k_max."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    ks = np.arange(1, k_max + 1)
    return ((ranks[:, None] <= ks[None, :]) / ks[None, :]).mean(axis=0)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> dict:
    """Two-sided paired t-test on per-user metric vectors."""
    res = stats.ttest_rel(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue)}


@dataclass
class RankReport:
    users: List[str]
    ranks: np.ndarray
    top_items: np.ndarray
    top_scores: np.ndarray
    top_probabilities: np.ndarray
    k_max: int = 100
    meta: dict = field(default_factory=dict)

    def metric(self, name: str) -> np.ndarray:
        kind, k = name.lower().split("@")
        fn = {"recall": recall_at_k, "ndcg": ndcg_at_k}[kind]
        return np.asarray(fn(self.ranks, int(k)))

    @property
    def aggregates(self) -> Dict[str, float]:
        out = {m: float(self.metric(m).mean()) for m in ("Recall@1", "Recall@10", "NDCG@10")}
        out["users"] = len(self.users)
        return out

    def precision_curve(self) -> np.ndarray:
        return precision_at_k_curve(self.ranks, self.k_max)

    def to_json(self, path=None) -> str:
        payload = {"aggregates": self.aggregates, "precision_at_k": self.precision_curve().tolist(),
                   "meta": self.meta}
        text = json.dumps(payload, indent=1)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_csv(self, path, top_n: int = 10) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "rank", "top_items", "top_scores", "top_probabilities"])
            for i, u in enumerate(self.users):
                w.writerow([u, int(self.ranks[i]),
                            " ".join(str(x) for x in self.top_items[i, :top_n]),
                            " ".join(f"{x:.6g}" for x in self.top_scores[i, :top_n]),
                            " ".join(f"{x:.6g}" for x in self.top_probabilities[i, :top_n])])


def evaluation_inputs(split, users: Sequence[str], stage: str) -> List[List[int]]:
    """Sequence fed to the model before predicting the held-out item."""
    if stage == "validation":
        return [list(split.train.users[u]) for u in users]
    if stage == "test":
        return [split.full_sequence(u)[:-1] for u in users]
    raise ValueError(f"stage must be validation or test, got {stage!r}")


def evaluate(model, split, stage: str = "test", users: Optional[Sequence[str]] = None,
             exclude_seen: bool = True, loss_kind: str = "bce", k_max: int = 100,
             batch_size: int = 256) -> RankReport:
    """Rank every held-out target against the full catalog."""
    if users is None:
        users = list(split.validation_users) if stage == "validation" else list(split.test_targets)
    targets_map = split.validation_targets if stage == "validation" else split.test_targets
    histories = evaluation_inputs(split, users, stage)
    targets = np.array([targets_map[u] for u in users], dtype=np.int64)
    ranks, items, top_s, top_p = [], [], [], []
    scored = 0
    for start in range(0, len(users), batch_size):
        hist = histories[start:start + batch_size]
        tgt = targets[start:start + batch_size]
        scores = model.full_catalog_scores(hist)
        if scores.shape[1] != split.n_items:
            raise ValueError("model catalog does not match split catalog")
        scored += scores.size
        ex = [h if exclude_seen else () for h in hist]
        ranks.append(rank_targets(scores, tgt, ex))
        ex_top = [set(h) - {int(t)} for h, t in zip(ex, tgt)]
        top = top_k(scores, k_max, ex_top)
        rows = np.arange(len(hist))[:, None]
        items.append(top)
        top_s.append(scores[rows, top - 1])
        top_p.append(probabilities(scores, loss_kind)[rows, top - 1])
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return RankReport(list(users), cat(ranks, (0,)).astype(np.int64), cat(items, (0, k_max)).astype(np.int64),
                      cat(top_s, (0, k_max)), cat(top_p, (0, k_max)), k_max=k_max,
                      meta={"stage": stage, "exclusion": "history" if exclude_seen else "none",
                            "tie_rule": TIE_RULE, "n_items": split.n_items,
                            "scores_per_user": scored // max(len(users), 1), "loss_kind": loss_kind})
