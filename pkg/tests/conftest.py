import numpy as np
import pytest

from gbcelab.data import InteractionLog, leave_one_out_split


def synthetic_log(n_users=40, n_items=30, min_len=4, max_len=12, seed=0):
    """Users walk forward through the catalog, so the next item is learnable."""
    rng = np.random.default_rng(seed)
    users = {}
    for u in range(1, n_users + 1):
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(1, n_items + 1))
        users[str(u)] = [((start - 1 + j) % n_items) + 1 for j in range(length)]
    return InteractionLog(users, [str(i) for i in range(1, n_items + 1)])


@pytest.fixture
def tiny_log():
    return synthetic_log()


@pytest.fixture
def tiny_split(tiny_log):
    return leave_one_out_split(tiny_log, n_validation_users=16, seed=0)
