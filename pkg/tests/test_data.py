import json
import os

import pytest

from gbcelab.data import (DataFormatError, InteractionLog, kcore_filter_users, leave_one_out_split,
                          load_interactions)


def test_two_line_file(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("1 5\n1 7\n")
    log = load_interactions(f)
    assert log.n_users == 1
    assert [log.item_ids[i - 1] for i in log.users["1"]] == ["5", "7"]


def test_numeric_ids_sort_numerically(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("1 10\n1 9\n2 100\n")
    log = load_interactions(f)
    assert log.item_ids == ["9", "10", "100"]
    assert log.users["1"] == [2, 1]


def test_csv_sorted_by_timestamp_stably(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("user,item,timestamp\nu,a,5\nu,b,1\nu,c,5\nv,a,2\n")
    log = load_interactions(f, "csv-with-time")
    assert [log.item_ids[i - 1] for i in log.users["u"]] == ["b", "a", "c"]


def test_malformed_line_reports_line_number(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("1 5\n1 7 9\n")
    with pytest.raises(DataFormatError, match=":2:"):
        load_interactions(f)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_interactions("/nonexistent/file.txt")


def test_unknown_format(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("1 5\n")
    with pytest.raises(ValueError):
        load_interactions(f, "parquet")


def test_kcore():
    log = InteractionLog({"a": [1, 2, 3, 4], "b": [1, 2, 3, 4, 5]}, list("abcde"))
    filtered = kcore_filter_users(log, 5)
    assert list(filtered.users) == ["b"]
    same = kcore_filter_users(log, 1)
    assert same.users == log.users and same.item_ids == log.item_ids


def test_leave_one_out_roles():
    log = InteractionLog({"x": [1, 2, 3, 4], "y": [4, 3, 2, 1]}, list("abcd"))
    split = leave_one_out_split(log, n_validation_users=1, seed=0)
    val = split.validation_users[0]
    other = ({"x", "y"} - {val}).pop()
    seq = log.users
    assert split.train.users[other] == seq[other][:3] and split.test_targets[other] == seq[other][3]
    assert split.train.users[val] == seq[val][:2]
    assert split.validation_targets[val] == seq[val][2] and split.test_targets[val] == seq[val][3]
    assert split.full_sequence(val) == seq[val]


def test_split_deterministic_and_bounded(tiny_log):
    a = leave_one_out_split(tiny_log, 10, seed=4)
    b = leave_one_out_split(tiny_log, 10, seed=4)
    assert a.validation_users == b.validation_users
    assert len(a.validation_users) == 10
    c = leave_one_out_split(tiny_log, 10_000, seed=4)
    assert len(c.validation_users) == tiny_log.n_users


def test_short_users_rejected():
    log = InteractionLog({"x": [1], "y": [1, 2, 3]}, list("abc"))
    with pytest.raises(DataFormatError, match="x"):
        leave_one_out_split(log)


def test_two_event_users_not_validated():
    log = InteractionLog({"x": [1, 2], "y": [1, 2, 3]}, list("abc"))
    split = leave_one_out_split(log, n_validation_users=5)
    assert split.validation_users == ["y"]


def test_manifest_roundtrip(tmp_path, tiny_split):
    path = tmp_path / "split.json"
    tiny_split.save_manifest(path)
    m = json.loads(path.read_text())
    assert m["validation_users"] == tiny_split.validation_users
    assert m["n_items"] == tiny_split.n_items


ML1M = os.environ.get("GBCELAB_ML1M", "/root/data/ml-1m.txt")


@pytest.mark.skipif(not os.path.exists(ML1M), reason="MovieLens-1M file not available")
def test_movielens_1m_counts():
    assert load_interactions(ML1M).stats() == {"users": 6040, "items": 3416, "interactions": 999611}
