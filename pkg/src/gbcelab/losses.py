"""BCE, gBCE, full Softmax and sampled Softmax losses as graph fragments.

Score conventions: ``s_pos`` has shape ``(...)`` and ``s_neg`` shape
``(..., k)``.  Every loss returns a per-row Tensor of shape ``(...)``; the
caller reduces it (masked mean in the model).  Plain floats/arrays are
accepted and wrapped as constants.

gBCE is computed by transforming the positive score with ``gamma_transform``
and feeding it to ordinary sampled BCE; ``gbce_direct`` evaluates the
powered-sigmoid form and exists as a cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from . import autograd as ag
from .autograd import Tensor
from .sampling import sampling_rate

KINDS = ("bce", "gbce", "softmax", "ssm")
# largest admissible beta * logsigmoid(s+) before expm1 loses the value
SATURATION_CEILING = -1e-15


class SaturatedScoreError(FloatingPointError):
    """sigma(s+)^beta rounded to exactly 1, so the transform is undefined."""


@dataclass
class ClampStats:
    """Counts positive terms whose transformed score hit the saturation ceiling."""

    clamped: int = 0
    positives: int = 0

    def rate(self) -> float:
        return self.clamped / self.positives if self.positives else 0.0

    def reset(self) -> None:
        self.clamped = 0
        self.positives = 0


@dataclass
class LossSpec:
    kind: str = "gbce"
    k: int = 1
    t: float = 0.0
    stats: ClampStats = field(default_factory=ClampStats, compare=False, repr=False)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if self.kind != "softmax" and self.k < 1:
            raise ValueError(f"sampled losses need k >= 1, got {self.k}")

    @property
    def sampled(self) -> bool:
        return self.kind != "softmax"

    def beta(self, catalog_size: int) -> float:
        """Power on the positive sigmoid; 1.0 for every kind except gBCE."""
        if self.kind != "gbce":
            return 1.0
        return beta_from_t(self.t, sampling_rate(self.k, catalog_size))


def beta_from_t(t: float, alpha: float) -> float:
    """beta = alpha * (t * (1 - 1/alpha) + 1/alpha); t=0 gives 1, t=1 gives alpha."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"sampling rate alpha must lie in (0, 1], got {alpha}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return alpha * (t * (1.0 - 1.0 / alpha) + 1.0 / alpha)


def _normaliser(s_neg: Tensor) -> float:
    return 1.0 / (s_neg.shape[-1] + 1)


def bce_sampled(s_pos, s_neg) -> Tensor:
    """-(logsigmoid(s+) + sum log(1 - sigmoid(s-))) / (k + 1), via softplus forms."""
    s_pos, s_neg = ag.as_tensor(s_pos), ag.as_tensor(s_neg)
    pos_term = ag.logsigmoid(s_pos)
    neg_term = ag.sum_(ag.softplus(s_neg), axis=-1)
    return ag.scale(ag.sub(neg_term, pos_term), _normaliser(s_neg))


def gamma_transform(s_pos, beta: float, clamp: bool = False,
                    stats: Optional[ClampStats] = None) -> Tensor:
    """Score whose sigmoid equals sigmoid(s_pos) ** beta (``beta`` may be per-row).

    gamma = -log(expm1(-beta * logsigmoid(s))).  When ``beta *
    logsigmoid(s)`` is at or above ``SATURATION_CEILING`` the transform is
    ill-defined; with ``clamp`` the value is pinned to the ceiling (and
    counted in ``stats``), otherwise :class:`SaturatedScoreError` is raised.
    """
    beta_arr = np.asarray(beta, dtype=np.float64)
    if not np.all(beta_arr > 0.0):
        raise ValueError(f"beta must be positive, got {beta}")
    s_pos = ag.as_tensor(s_pos)
    if stats is not None:
        stats.positives += s_pos.data.size
    if np.all(beta_arr == 1.0):
        return s_pos
    beta = beta if beta_arr.ndim == 0 else beta_arr
    scaled = ag.scale(ag.logsigmoid(s_pos), beta)
    saturated = scaled.data > SATURATION_CEILING
    if saturated.any():
        if not clamp:
            raise SaturatedScoreError(
                f"{int(saturated.sum())} positive score(s) saturate sigmoid^beta (beta={beta})")
        if stats is not None:
            stats.clamped += int(saturated.sum())
        scaled = ag.clamp_max(scaled, SATURATION_CEILING)
    return ag.neg(ag.log_expm1(ag.neg(scaled)))


def gbce(s_pos, s_neg, beta: float, clamp: bool = False,
         stats: Optional[ClampStats] = None) -> Tensor:
    """Generalised BCE, computed as sampled BCE on gamma-transformed positives."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    return bce_sampled(gamma_transform(s_pos, beta, clamp=clamp, stats=stats), s_neg)


def gbce_direct(s_pos, s_neg, beta: float) -> Tensor:
    """-(beta * logsigmoid(s+) - sum softplus(s-)) / (k + 1); reference form, ``beta`` may be per-row."""
    s_pos, s_neg = ag.as_tensor(s_pos), ag.as_tensor(s_neg)
    pos_term = ag.scale(ag.logsigmoid(s_pos), beta)
    neg_term = ag.sum_(ag.softplus(s_neg), axis=-1)
    return ag.scale(ag.sub(neg_term, pos_term), _normaliser(s_neg))


def softmax_loss(all_scores, positive) -> Tensor:
    """-log softmax(all_scores)[positive]; ``positive`` indexes the last axis (0-based)."""
    all_scores = ag.as_tensor(all_scores)
    positive = np.asarray(positive, dtype=np.int64)
    picked = ag.reshape(ag.take_last(all_scores, positive[..., None]), positive.shape)
    return ag.sub(ag.logsumexp(all_scores, axis=-1), picked)


def sampled_softmax_loss(s_pos, s_neg) -> Tensor:
    """-log(e^{s+} / (e^{s+} + sum e^{s-})) with a stable log-sum-exp."""
    s_pos, s_neg = ag.as_tensor(s_pos), ag.as_tensor(s_neg)
    both = ag.concat([ag.reshape(s_pos, s_pos.shape + (1,)), s_neg], axis=-1)
    return ag.sub(ag.logsumexp(both, axis=-1), s_pos)


def sampled_loss(spec: LossSpec, s_pos, s_neg, catalog_size: int) -> Tensor:
    """Dispatch a sampled loss kind; gBCE clamps saturated positives and counts them."""
    if spec.kind == "bce":
        return bce_sampled(s_pos, s_neg)
    if spec.kind == "gbce":
        return gbce(s_pos, s_neg, spec.beta(catalog_size), clamp=True, stats=spec.stats)
    if spec.kind == "ssm":
        return sampled_softmax_loss(s_pos, s_neg)
    raise ValueError(f"{spec.kind} is not a sampled loss")


def probabilities(scores: np.ndarray, kind: str) -> np.ndarray:
    """Map raw scores to the probabilities a model trained with ``kind`` implies."""
    if kind == "softmax":
        return softmax(scores, axis=-1)
    return expit(scores)
