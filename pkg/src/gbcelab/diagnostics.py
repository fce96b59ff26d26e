"""Overconfidence measurements on trained models.

Probabilities are sigmoid(score) for pointwise-trained models and
softmax over the catalog for Softmax-trained ones.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import evaluate, evaluation_inputs, precision_at_k_curve, top_k
from .losses import probabilities
from .theory import converged_sigmoid


@dataclass
class OverconfidenceReport:
    k_max: int
    users: list
    precision_at_k: np.ndarray
    mean_probability_at_k: np.ndarray
    theory_overlay: np.ndarray
    probability_mass: np.ndarray
    alpha: float
    beta: float
    meta: dict = field(default_factory=dict)

    @property
    def mean_mass(self) -> float:
        return float(self.probability_mass.mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "precision", "mean_probability", "theory_overlay"])
            for i in range(self.k_max):
                w.writerow([i + 1, f"{self.precision_at_k[i]:.8g}",
                            f"{self.mean_probability_at_k[i]:.8g}", f"{self.theory_overlay[i]:.8g}"])


def _user_scores(model, split, users: Sequence[str], stage: str = "test") -> np.ndarray:
    return model.full_catalog_scores(evaluation_inputs(split, users, stage))


def probability_at_rank(model, split, user: str, k_max: int = 100, loss_kind: str = "bce",
                        exclude_seen: bool = True) -> np.ndarray:
    """Predicted probability of the items ranked 1..k_max for one user."""
    hist = evaluation_inputs(split, [user], "test")
    scores = model.full_catalog_scores(hist)
    ex = [set(hist[0]) - {split.test_targets[user]}] if exclude_seen else None
    top = top_k(scores, k_max, ex)[0]
    return probabilities(scores, loss_kind)[0, top - 1]


def probability_mass(model, split, user: str, loss_kind: str = "bce") -> float:
    """Sum of predicted probabilities over the whole catalog."""
    scores = _user_scores(model, split, [user])
    return float(probabilities(scores, loss_kind).sum())


def mean_probability_at_k_curve(top_probabilities: np.ndarray) -> np.ndarray:
    """For each K: mean over users of the mean probability of the items at ranks <= K."""
    top_probabilities = np.asarray(top_probabilities)
    if top_probabilities.ndim == 1:
        top_probabilities = top_probabilities[None]
    if top_probabilities.shape[0] == 0:
        raise ValueError("no users")
    ks = np.arange(1, top_probabilities.shape[1] + 1)
    return (np.cumsum(top_probabilities, axis=1) / ks).mean(axis=0)


def theory_overlay(precision_curve: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Probability the converged model would predict if Precision@K were the prior."""
    return np.asarray(converged_sigmoid(np.asarray(precision_curve), alpha, beta))


def overconfidence_report(model, split, loss_kind: str, alpha: float, beta: float,
                          users: Optional[Sequence[str]] = None, k_max: int = 100,
                          stage: str = "test") -> OverconfidenceReport:
    report = evaluate(model, split, stage, users=users, loss_kind=loss_kind, k_max=k_max)
    users = report.users
    masses = []
    for start in range(0, len(users), 256):
        scores = _user_scores(model, split, users[start:start + 256], stage)
        masses.append(probabilities(scores, loss_kind).sum(axis=1))
    precision = precision_at_k_curve(report.ranks, k_max)
    return OverconfidenceReport(
        k_max=k_max, users=list(users), precision_at_k=precision,
        mean_probability_at_k=mean_probability_at_k_curve(report.top_probabilities),
        theory_overlay=theory_overlay(precision, alpha, beta),
        probability_mass=np.concatenate(masses) if masses else np.zeros(0),
        alpha=alpha, beta=beta, meta={"loss_kind": loss_kind, **report.meta})


def rank_probability_csv(path, probs: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "probability"])
        for r, p in enumerate(probs, 1):
            w.writerow([r, f"{p:.8g}"])
