"""Interaction-log ingestion, k-core user filtering and leave-one-out splits.

Items get dense 1-based indices (0 is the padding item).  Raw item ids are
ordered numerically when they all parse as integers, so logs that are
already densely numbered (e.g. the BERT4Rec text exports) keep their ids.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np


class DataFormatError(ValueError):
    pass


def _sort_key(raw_ids: Sequence[str]):
    try:
        keyed = [(int(r), r) for r in raw_ids]
        return [r for _, r in sorted(keyed)]
    except ValueError:
        return sorted(raw_ids)


@dataclass
class InteractionLog:
    """users: user id -> time-ordered dense item indices; item_ids[i-1] is item i's raw id."""

    users: Dict[str, List[int]]
    item_ids: List[str]

    def __post_init__(self):
        n = len(self.item_ids)
        for u, seq in self.users.items():
            if not seq:
                raise DataFormatError(f"user {u} has an empty sequence")
            if min(seq) < 1 or max(seq) > n:
                raise DataFormatError(f"user {u} references items outside 1..{n}")

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.users.values())

    def item_index(self) -> Dict[str, int]:
        return {raw: i + 1 for i, raw in enumerate(self.item_ids)}

    @classmethod
    def from_raw(cls, raw: Dict[str, List[str]]) -> "InteractionLog":
        catalog = _sort_key(sorted({i for seq in raw.values() for i in seq}))
        index = {r: i + 1 for i, r in enumerate(catalog)}
        return cls({u: [index[i] for i in seq] for u, seq in raw.items()}, list(catalog))

    def stats(self) -> dict:
        return {"users": self.n_users, "items": self.n_items, "interactions": self.n_interactions}


def load_interactions(path, format: str = "bert4rec-txt") -> InteractionLog:
    """Read ``user item`` lines (temporal order) or a ``user,item,timestamp`` CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    raw: Dict[str, List[str]] = {}
    if format == "bert4rec-txt":
        with path.open("r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise DataFormatError(f"{path}:{lineno}: expected 'user item', got {line.rstrip()!r}")
                raw.setdefault(parts[0], []).append(parts[1])
    elif format == "csv-with-time":
        events: Dict[str, list] = {}
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataFormatError(f"{path}: empty file")
            cols = [h.strip().lower() for h in header]
            try:
                ui, ii, ti = cols.index("user"), cols.index("item"), cols.index("timestamp")
            except ValueError:
                raise DataFormatError(f"{path}:1: header must contain user,item,timestamp; got {header}")
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                try:
                    ts = float(row[ti])
                    events.setdefault(row[ui].strip(), []).append((ts, lineno, row[ii].strip()))
                except (IndexError, ValueError):
                    raise DataFormatError(f"{path}:{lineno}: malformed row {row!r}")
        for u, ev in events.items():
            ev.sort(key=lambda e: (e[0], e[1]))
            raw[u] = [e[2] for e in ev]
    else:
        raise ValueError(f"unknown format {format!r}; expected bert4rec-txt or csv-with-time")
    if not raw:
        raise DataFormatError(f"{path}: no interactions")
    return InteractionLog.from_raw(raw)


def kcore_filter_users(log: InteractionLog, min_interactions: int) -> InteractionLog:
    """Drop users with fewer than ``min_interactions`` events and re-densify items."""
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")
    kept = {u: s for u, s in log.users.items() if len(s) >= min_interactions}
    if not kept:
        raise DataFormatError(f"no user has >= {min_interactions} interactions")
    return InteractionLog.from_raw({u: [log.item_ids[i - 1] for i in s] for u, s in kept.items()})


@dataclass
class DatasetSplit:
    train: InteractionLog
    test_targets: Dict[str, int]
    validation_users: List[str]
    validation_targets: Dict[str, int]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def manifest(self) -> dict:
        return {"seed": self.seed, "n_items": self.n_items, "n_users": self.train.n_users,
                "n_train_interactions": self.train.n_interactions,
                "validation_users": list(self.validation_users),
                "validation_targets": self.validation_targets,
                "test_targets": self.test_targets, **self.meta}

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))

    def full_sequence(self, user: str) -> List[int]:
        seq = list(self.train.users[user])
        if user in self.validation_targets:
            seq.append(self.validation_targets[user])
        return seq + [self.test_targets[user]]


def leave_one_out_split(log: InteractionLog, n_validation_users: int = 512, seed: int = 0) -> DatasetSplit:
    """Hold out every user's last item for test and, for a seeded random subset
    of users with at least 3 events, the second-last item for validation."""
    short = [u for u, s in log.users.items() if len(s) < 2]
    if short:
        raise DataFormatError(f"users with < 2 interactions cannot be split: {short[:20]}")
    eligible = sorted(u for u, s in log.users.items() if len(s) >= 3)
    if not eligible and n_validation_users > 0:
        raise DataFormatError("no user has >= 3 interactions; cannot draw validation users")
    rng = np.random.default_rng(seed)
    n_val = min(n_validation_users, len(eligible))
    chosen = [eligible[i] for i in sorted(rng.choice(len(eligible), size=n_val, replace=False))]
    val_set = set(chosen)
    train, test, val = {}, {}, {}
    for u, seq in log.users.items():
        test[u] = seq[-1]
        if u in val_set:
            val[u] = seq[-2]
            train[u] = list(seq[:-2])
        else:
            train[u] = list(seq[:-1])
    # training log keeps the full catalog so indices stay aligned
    return DatasetSplit(InteractionLog(train, list(log.item_ids)), test, chosen, val, seed=seed,
                        meta={"n_validation_users_requested": n_validation_users})
