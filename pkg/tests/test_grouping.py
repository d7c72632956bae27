import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafe.grouping import (
    ConfusionMatrix,
    PredicateGroupAssignment,
    PredicateStats,
    build_confusion,
    group_predicates,
    initial_grouping,
    load_confusion_csv,
    load_grouping,
    max_min_ratio,
    random_grouping,
    save_confusion_csv,
    save_grouping,
    similarity_adjustment,
)


def stats_of(counts):
    return PredicateStats.from_counts({f"p{i}": c for i, c in enumerate(counts)})


def confusion_with(labels, entries):
    values = np.eye(len(labels))
    for (a, b), v in entries.items():
        values[labels.index(a), labels.index(b)] = v
    return ConfusionMatrix(tuple(labels), values)


def test_initial_grouping_by_rank():
    stats = stats_of([100, 50, 20, 10, 5, 1])
    assert initial_grouping(stats, 3).groups == (("p0", "p1"), ("p2", "p3"), ("p4", "p5"))


def test_remainder_goes_to_last_group():
    sizes = [len(g) for g in initial_grouping(stats_of([70, 60, 50, 40, 30, 20, 10]), 3).groups]
    assert sizes == [2, 2, 3]


def test_k_larger_than_vocabulary_is_rejected():
    with pytest.raises(ValueError):
        initial_grouping(stats_of([3, 2]), 3)


def test_ties_broken_by_label():
    stats = PredicateStats.from_counts({"b": 5, "a": 5, "c": 9})
    assert stats.predicates == ("c", "a", "b")


def test_riding_driving_move():
    stats = PredicateStats.from_counts({"on": 900, "riding": 500, "driving": 300, "near": 100, "in": 50, "under": 20})
    base = initial_grouping(stats, 3)
    assert base.groups[0] == ("on", "riding") and base.groups[1] == ("driving", "near")
    stats = PredicateStats.from_counts({"riding": 900, "driving": 500, "on": 300, "near": 100, "in": 50, "under": 20})
    base = initial_grouping(stats, 3)
    assert base.groups[0] == ("riding", "driving")
    confusion = confusion_with(list(stats.predicates), {("riding", "driving"): 0.85, ("riding", "riding"): 0.15})
    adjusted = similarity_adjustment(base, confusion, 0.8)
    assert "driving" not in adjusted.groups[0] and "driving" in adjusted.groups[1]
    assert adjusted.groups[0] == ("riding",)


def test_identity_confusion_leaves_grouping_unchanged():
    stats = stats_of([100, 50, 20, 10, 5, 1])
    base = initial_grouping(stats, 3)
    confusion = ConfusionMatrix(stats.predicates, np.eye(6))
    assert similarity_adjustment(base, confusion, 0.8).groups == base.groups


def test_last_group_moves_higher_count_member_back():
    stats = stats_of([100, 50, 20, 10, 5, 1])
    base = initial_grouping(stats, 3)
    confusion = confusion_with(list(stats.predicates), {("p4", "p5"): 0.9})
    adjusted = similarity_adjustment(base, confusion, 0.8)
    assert adjusted.groups[2] == ("p5",) and "p4" in adjusted.groups[1]


def test_mu_above_every_off_diagonal_is_identity():
    rng = np.random.default_rng(0)
    stats = stats_of(sorted(rng.integers(1, 1000, 12), reverse=True))
    values = rng.random((12, 12)) * 0.5
    base = initial_grouping(stats, 3)
    assert similarity_adjustment(base, ConfusionMatrix(stats.predicates, values), 0.5 + 1e-9).groups == base.groups


def test_build_confusion_examples():
    labels = ["a", "b", "c"]
    perfect = build_confusion([(l, l) for l in labels for _ in range(3)], labels)
    np.testing.assert_array_equal(perfect.values, np.eye(3))
    single = build_confusion([("a", "c")] * 4, labels)
    np.testing.assert_array_equal(single.values[0], [0, 0, 1])
    assert not single.values[1:].any()


def test_build_confusion_matches_tally():
    rng = np.random.default_rng(1)
    labels = [f"r{i}" for i in range(5)]
    pairs = [(labels[rng.integers(5)], labels[rng.integers(5)]) for _ in range(200)]
    c = build_confusion(pairs, labels)
    for i, gt in enumerate(labels):
        total = sum(1 for g, _ in pairs if g == gt)
        for j, pr in enumerate(labels):
            tally = sum(1 for g, p in pairs if g == gt and p == pr)
            assert c.values[i, j] == (tally / total if total else 0.0)
    rows = c.values.sum(axis=1)
    assert np.all((np.abs(rows - 1) < 1e-6) | (rows == 0))


def _fuzz_case(rng):
    n = int(rng.integers(3, 40))
    counts = sorted(rng.integers(0, 5000, n).tolist(), reverse=True)
    stats = stats_of(counts)
    raw = rng.random((n, n)) ** rng.uniform(0.2, 4)
    confusion = ConfusionMatrix(stats.predicates, raw / raw.sum(axis=1, keepdims=True))
    return stats, confusion, float(rng.uniform(0.01, 1.0))


def check_partition(stats, confusion, mu):
    base = initial_grouping(stats, 3)
    out = similarity_adjustment(base, confusion, mu)
    flat = [p for g in out.groups for p in g]
    assert sorted(flat) == sorted(stats.predicates) and len(flat) == len(set(flat))
    where_before = {p: g for g, members in enumerate(base.groups) for p in members}
    where_after = {p: g for g, members in enumerate(out.groups) for p in members}
    assert all(abs(where_after[p] - where_before[p]) <= 1 for p in flat)
    spaces = out.spaces
    assert set(spaces[-1]) == set(stats.predicates)
    assert all(set(a) < set(b) or set(a) <= set(b) for a, b in zip(spaces, spaces[1:]))


def test_partition_invariant_on_1000_random_cases():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        check_partition(*_fuzz_case(rng))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_invariant_property(seed):
    check_partition(*_fuzz_case(np.random.default_rng(seed)))


def test_zipf_groups_are_better_balanced():
    counts = [int(round(6777 / (r**1.2))) for r in range(1, 57)]
    stats = stats_of(counts)
    global_ratio = max_min_ratio(counts)
    for group in initial_grouping(stats, 3).groups:
        assert max_min_ratio([stats.count_of(p) for p in group]) < global_ratio


def test_random_grouping_keeps_sizes_and_is_seeded():
    stats = stats_of(list(range(20, 0, -1)))
    a, b = random_grouping(stats, 3, 5), random_grouping(stats, 3, 5)
    assert a == b
    assert [len(g) for g in a.groups] == [6, 6, 8]
    assert sorted(p for g in a.groups for p in g) == sorted(stats.predicates)


def test_group_predicates_modes():
    stats = stats_of([9, 8, 7, 6, 5, 4])
    assert group_predicates(stats, None, 0.8, 3, "average").groups == initial_grouping(stats, 3).groups
    with pytest.raises(ValueError):
        group_predicates(stats, None, 0.8, 3, "cognition")
    with pytest.raises(ValueError):
        group_predicates(stats, None, 0.8, 3, "alphabetical")


def test_label_order_has_prefix_property():
    stats = stats_of([100, 50, 20, 10, 5, 1])
    moved = PredicateGroupAssignment((("p0",), ("p2", "p1", "p3"), ("p4", "p5")))
    order = moved.label_order(stats)
    assert order == ["p0", "p1", "p2", "p3", "p4", "p5"]
    for space in moved.spaces:
        assert set(order[: len(space)]) == set(space)


def test_persistence_round_trip(tmp_path):
    stats = stats_of([100, 50, 20, 10, 5, 1])
    a = similarity_adjustment(initial_grouping(stats, 3), ConfusionMatrix(stats.predicates, np.eye(6)), 0.8)
    save_grouping(a, tmp_path / "g.json")
    assert load_grouping(tmp_path / "g.json") == a
    rng = np.random.default_rng(3)
    labels = ("on, top", 'say "hi"', "plain")
    c = ConfusionMatrix(labels, rng.random((3, 3)))
    save_confusion_csv(c, tmp_path / "c.csv")
    back = load_confusion_csv(tmp_path / "c.csv")
    assert back.labels == labels and np.array_equal(back.values, c.values)
