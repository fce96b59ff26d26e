"""Converged-score predictions for sampled (g)BCE and numeric oracles for them.

A model trained with k uniform negatives per positive (sampling rate
``alpha``) and power ``beta`` on the positive sigmoid settles where each
item's expected loss contribution
``-(p * beta * log s + alpha * (1 - p) * log(1 - s))`` is minimal, s being
the item's predicted sigmoid.  The closed forms below give that minimiser;
``numeric_minimizer`` and ``synthetic_convergence_experiment`` check it
without using the closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .losses import LossSpec, beta_from_t, sampled_loss
from .sampling import sample_negative_indices, sampling_rate


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorDistribution:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or len(p) < 1:
            raise ValueError("prior must be a non-empty vector")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("prior probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"prior sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "p", p)

    def __len__(self):
        return len(self.p)


@dataclass
class ConvergencePrediction:
    sigma: np.ndarray
    alpha: float
    beta: float


def converged_sigmoid(p, alpha: float, beta: float):
    """beta*p / (alpha - alpha*p + beta*p); vectorised over ``p``."""
    p = np.asarray(p, dtype=np.float64)
    out = beta * p / (alpha - alpha * p + beta * p)
    return float(out) if out.ndim == 0 else out


def bce_converged_sigmoid(p, alpha: float):
    """Plain BCE (beta = 1): p / (alpha - alpha*p + p)."""
    p = np.asarray(p, dtype=np.float64)
    out = p / (alpha - alpha * p + p)
    return float(out) if out.ndim == 0 else out


def sasrec_converged_sigmoid(p, catalog_size: int):
    """One negative per positive: (p|I| - p) / (p|I| - 2p + 1)."""
    if catalog_size < 2:
        raise ValueError("catalog_size must be >= 2")
    p = np.asarray(p, dtype=np.float64)
    out = (p * catalog_size - p) / (p * catalog_size - 2 * p + 1)
    return float(out) if out.ndim == 0 else out


def predict(prior: PriorDistribution, k: int, t: float) -> ConvergencePrediction:
    alpha = sampling_rate(k, len(prior))
    beta = beta_from_t(t, alpha)
    return ConvergencePrediction(np.asarray(converged_sigmoid(prior.p, alpha, beta)), alpha, beta)


def invert_converged_sigmoid(sigma, alpha: float, beta: float):
    """Prior p that converges to ``sigma``: p = alpha*s / (beta - beta*s + alpha*s)."""
    s = np.asarray(sigma, dtype=np.float64)
    out = alpha * s / (beta - beta * s + alpha * s)
    return float(out) if out.ndim == 0 else out


def expected_item_loss(sigma: float, p: float, alpha: float, beta: float) -> float:
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    return -(p * beta * math.log(sigma) + alpha * (1.0 - p) * math.log1p(-sigma))


def expected_item_loss_derivative(sigma: float, p: float, alpha: float, beta: float) -> float:
    """d E[L_i] / d sigma = -beta*p/sigma + alpha*(1-p)/(1-sigma)."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    return -beta * p / sigma + alpha * (1.0 - p) / (1.0 - sigma)


def numeric_minimizer(p: float, alpha: float, beta: float, tol: float = 1e-12,
                      method: str = "bisection", max_iter: int = 200) -> float:
    """Minimise ``expected_item_loss`` over sigma in (0, 1) without the closed form.

    ``bisection`` finds the sign change of the derivative (which increases
    monotonically from -inf to +inf on the open interval); ``golden`` runs a
    golden-section search on the loss itself.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly inside (0, 1), got {p}")
    lo, hi = 0.0, 1.0
    if method == "bisection":
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            if expected_item_loss_derivative(mid, p, alpha, beta) > 0.0:
                hi = mid
            else:
                lo = mid
            if hi - lo < tol:
                return 0.5 * (lo + hi)
    elif method == "golden":
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = 1e-300, 1.0 - 1e-16
        c, d = b - invphi * (b - a), a + invphi * (b - a)
        fc, fd = expected_item_loss(c, p, alpha, beta), expected_item_loss(d, p, alpha, beta)
        for _ in range(max_iter):
            if b - a < tol:
                return 0.5 * (a + b)
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = expected_item_loss(c, p, alpha, beta)
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = expected_item_loss(d, p, alpha, beta)
        # golden section stalls near sqrt(machine eps) in relative terms
        if b - a < 1e-7:
            return 0.5 * (a + b)
    else:
        raise ValueError(f"unknown method {method!r}")
    raise ConvergenceError(f"no convergence after {max_iter} iterations (p={p}, alpha={alpha}, beta={beta})")


DEFAULT_P_GRID = (0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99)
DEFAULT_ALPHA_GRID = (1 / 999, 0.01, 0.1, 0.5, 1.0)


def oracle_grid(p_grid: Sequence[float] = DEFAULT_P_GRID,
                alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID) -> list:
    """Rows of (p, alpha, beta, closed_form, numeric_min, abs_error) over beta in {alpha, (1+alpha)/2, 1}."""
    rows = []
    for alpha in alpha_grid:
        for beta in sorted({alpha, (1.0 + alpha) / 2.0, 1.0}):
            for p in p_grid:
                closed = converged_sigmoid(p, alpha, beta)
                num = numeric_minimizer(p, alpha, beta)
                rows.append({"p": p, "alpha": alpha, "beta": beta, "closed_form": closed,
                             "numeric_min": num, "abs_error": abs(closed - num)})
    return rows


@dataclass
class SyntheticResult:
    sigma: np.ndarray
    target: np.ndarray
    alpha: float
    beta: float
    max_abs_error: float
    config: dict = field(default_factory=dict)


def lr_schedule(step: int, steps: int, lr: float) -> float:
    """Constant ``lr``, divided by 10 at 50% and again at 75% of training."""
    if step >= 0.75 * steps:
        return lr * 0.01
    if step >= 0.5 * steps:
        return lr * 0.1
    return lr


def synthetic_convergence_experiment(prior, k: int, t: float, steps: int = 200_000,
                                     lr: float = 0.1, seed: int = 0, loss: str = "gbce",
                                     batch_size: int = 100,
                                     init: Optional[np.ndarray] = None) -> SyntheticResult:
    """Fit one free score per item by SGD on sampled (g)BCE.

    ``steps`` counts training samples (positive + k negatives); they are
    consumed in minibatches of ``batch_size`` using the mean loss, and the
    learning rate follows :func:`lr_schedule` over the update count.
    """
    prior = prior if isinstance(prior, PriorDistribution) else PriorDistribution(np.asarray(prior))
    n = len(prior)
    if n < 2:
        raise ValueError("need at least 2 items")
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    spec = LossSpec(kind=loss, k=k, t=t)
    alpha = sampling_rate(k, n)
    beta = spec.beta(n)
    rng = np.random.default_rng(seed)
    scores = ag.parameter(np.zeros(n + 1) if init is None else np.concatenate([[0.0], init]), "scores")
    cdf = np.cumsum(prior.p)
    n_updates = max(1, steps // batch_size)
    for step in range(n_updates):
        pos = np.minimum(np.searchsorted(cdf, rng.random(batch_size), side="right"), n - 1) + 1
        neg = sample_negative_indices(pos, n, k, rng)
        s_pos = ag.embedding(ag.reshape(scores, (n + 1, 1)), pos)
        s_neg = ag.embedding(ag.reshape(scores, (n + 1, 1)), neg)
        value = ag.mean(sampled_loss(spec, ag.reshape(s_pos, pos.shape),
                                     ag.reshape(s_neg, neg.shape), n))
        value.backward()
        scores.data -= lr_schedule(step, n_updates, lr) * scores.grad
        if not np.all(np.isfinite(scores.data)):
            raise ConvergenceError(f"non-finite score at update {step}")
    sigma = 1.0 / (1.0 + np.exp(-scores.data[1:]))
    target = np.asarray(converged_sigmoid(prior.p, alpha, beta))
    return SyntheticResult(sigma=sigma, target=target, alpha=alpha, beta=beta,
                           max_abs_error=float(np.abs(sigma - target).max()),
                           config={"k": k, "t": t, "steps": steps, "lr": lr, "seed": seed,
                                   "loss": loss, "batch_size": batch_size,
                                   "schedule": "x0.1 at 50% and 75%"})
