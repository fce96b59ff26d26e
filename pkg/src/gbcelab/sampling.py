"""Uniform-with-replacement negative sampling over a 1-based item catalog."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np


@dataclass(frozen=True)
class NegativeSampleSet:
    k: int
    indices: np.ndarray
    excluded: int

    def __post_init__(self):
        if len(self.indices) != self.k:
            raise ValueError(f"expected {self.k} negatives, got {len(self.indices)}")
        if np.any(self.indices == self.excluded):
            raise ValueError("negative sample equals the positive item")


def _check(catalog_size: int, k: int) -> None:
    if catalog_size < 2:
        raise ValueError(f"catalog_size must be >= 2 to sample negatives, got {catalog_size}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def sample_negative_indices(positives: np.ndarray, catalog_size: int, k: int,
                            rng: np.random.Generator,
                            history: Optional[Iterable[Iterable[int]]] = None) -> np.ndarray:
    """Vectorised sampler: returns ``positives.shape + (k,)`` item indices.

    Each draw is uniform over ``{1..catalog_size} minus {positive}``: draw
    from ``catalog_size - 1`` values and shift those at or above the positive
    up by one.  With ``history`` (one collection per leading row of
    ``positives``) items from the user's history are rejected and redrawn.
    """
    _check(catalog_size, k)
    positives = np.asarray(positives, dtype=np.int64)
    draws = rng.integers(1, catalog_size, size=positives.shape + (k,))
    draws += draws >= positives[..., None]
    if history is not None:
        draws = _reject_history(draws, positives, catalog_size, rng, history)
    return draws


def _reject_history(draws, positives, catalog_size, rng, history):
    rows = draws.reshape(len(positives), -1)
    pos_rows = positives.reshape(len(positives), -1)
    for r, seen in enumerate(history):
        banned = np.fromiter(set(seen), dtype=np.int64)
        if len(banned) >= catalog_size - 1:
            raise ValueError(f"row {r}: history covers the whole catalog, no negatives left")
        bad = np.isin(rows[r], banned)
        while bad.any():
            fresh = rng.integers(1, catalog_size, size=int(bad.sum()))
            pos = np.broadcast_to(pos_rows[r][:, None], (pos_rows.shape[1], draws.shape[-1])).reshape(-1)[bad]
            fresh += fresh >= pos
            rows[r][bad] = fresh
            bad = np.isin(rows[r], banned)
    return rows.reshape(draws.shape)


def sample_negatives(positive: int, catalog_size: int, k: int,
                     rng: np.random.Generator) -> NegativeSampleSet:
    idx = sample_negative_indices(np.array(positive), catalog_size, k, rng)
    return NegativeSampleSet(k=k, indices=idx, excluded=int(positive))


def sampling_rate(k: int, catalog_size: int) -> float:
    """alpha = k / |I^-| with |I^-| = catalog_size - 1."""
    if catalog_size < 2:
        raise ValueError(f"catalog_size must be >= 2, got {catalog_size}")
    return k / (catalog_size - 1)


def worker_rngs(seed: int, n: int) -> list:
    """Independent generator streams for ``n`` workers derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
