"""Cognition-based predicate grouping.

Predicates are sorted by training count (descending, ties by label) and cut
into K contiguous groups: the first K-1 groups get N // K predicates each and
the last takes the remainder. A single adjustment pass then separates
confusable predicates: inside groups 1..K-1 the lower-count member of a
confusable pair moves one group later; inside group K the higher-count member
moves one group earlier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PredicateStats:
    predicates: tuple[str, ...]
    counts: tuple[int, ...]

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> PredicateStats:
        """Sorted by count descending, ties broken by label."""
        items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(tuple(k for k, _ in items), tuple(int(v) for _, v in items))

    def count_of(self, predicate: str) -> int:
        return self.counts[self.predicates.index(predicate)]

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.predicates, self.counts))


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    values: np.ndarray  # (N, N), row = ground truth, column = prediction

    def __getitem__(self, key: tuple[str, str]) -> float:
        i, j = key
        return float(self.values[self.labels.index(i), self.labels.index(j)])


@dataclass(frozen=True)
class PredicateGroupAssignment:
    groups: tuple[tuple[str, ...], ...]
    mu: float | None = None

    @property
    def spaces(self) -> list[tuple[str, ...]]:
        """Growing classification spaces: union of groups 1..k."""
        out, acc = [], ()
        for g in self.groups:
            acc = acc + tuple(g)
            out.append(acc)
        return out

    def group_of(self, predicate: str) -> int:
        """1-based group index."""
        for k, g in enumerate(self.groups, start=1):
            if predicate in g:
                return k
        raise KeyError(predicate)

    def label_order(self, stats: PredicateStats | None = None) -> list[str]:
        """Group 1 labels, then group 2, ...; each group sorted by count (then label)."""
        order = []
        for g in self.groups:
            if stats is None:
                order.extend(g)
            else:
                counts = stats.as_dict()
                order.extend(sorted(g, key=lambda r: (-counts.get(r, 0), r)))
        return order


def initial_grouping(stats: PredicateStats, k: int = 3) -> PredicateGroupAssignment:
    n = len(stats.predicates)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of predicates ({n})")
    if list(stats.counts) != sorted(stats.counts, reverse=True):
        raise ValueError("stats must be sorted by descending count")
    size = n // k
    preds = stats.predicates
    groups = [preds[g * size : (g + 1) * size] for g in range(k - 1)]
    groups.append(preds[(k - 1) * size :])
    return PredicateGroupAssignment(tuple(tuple(g) for g in groups))


def similarity_adjustment(
    assignment: PredicateGroupAssignment, confusion: ConfusionMatrix, mu: float
) -> PredicateGroupAssignment:
    """One adjustment pass over a snapshot of the groups, in group then index order.

    A moved predicate is not revisited, so nothing moves more than one group.
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    k = len(assignment.groups)
    snapshot = [list(g) for g in assignment.groups]
    groups = [list(g) for g in assignment.groups]
    if k == 1:
        return PredicateGroupAssignment(tuple(tuple(g) for g in groups), mu)
    moved: set[str] = set()

    def move(pred: str, src: int, dst: int) -> None:
        groups[src].remove(pred)
        groups[dst].append(pred)
        moved.add(pred)

    for g, members in enumerate(snapshot):
        last = g == k - 1
        for a, r_i in enumerate(members):
            if r_i in moved:
                continue
            for r_j in members[a + 1 :]:
                if r_j in moved:
                    continue
                if confusion[r_i, r_j] >= mu:
                    if last:
                        move(r_i, g, g - 1)
                        break
                    move(r_j, g, g + 1)
    return PredicateGroupAssignment(tuple(tuple(g) for g in groups), mu)


def build_confusion(predictions: list[tuple[str, str]], labels: list[str]) -> ConfusionMatrix:
    """Row-normalised (ground truth, prediction) counts; rows without samples stay zero."""
    pos = {r: i for i, r in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)))
    for gt, pred in predictions:
        counts[pos[gt], pos[pred]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    values = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return ConfusionMatrix(tuple(labels), values)


def random_grouping(stats: PredicateStats, k: int, seed: int) -> PredicateGroupAssignment:
    """Random partition with the same group sizes as the count-based split."""
    sizes = [len(g) for g in initial_grouping(stats, k).groups]
    perm = list(np.random.default_rng(seed).permutation(len(stats.predicates)))
    groups, start = [], 0
    for size in sizes:
        groups.append(tuple(stats.predicates[i] for i in perm[start : start + size]))
        start += size
    return PredicateGroupAssignment(tuple(groups))


def group_predicates(
    stats: PredicateStats,
    confusion: ConfusionMatrix | None,
    mu: float,
    k: int = 3,
    mode: str = "cognition",
    seed: int = 0,
) -> PredicateGroupAssignment:
    if mode == "random":
        return random_grouping(stats, k, seed)
    base = initial_grouping(stats, k)
    if mode == "average":
        return PredicateGroupAssignment(base.groups, mu)
    if mode == "cognition":
        if confusion is None:
            raise ValueError("cognition grouping needs a confusion matrix")
        return similarity_adjustment(base, confusion, mu)
    raise ValueError(f"unknown grouping mode {mode!r}")


def max_min_ratio(counts) -> float:
    counts = [c for c in counts if c > 0]
    return max(counts) / min(counts)


# --- persistence --------------------------------------------------------------


def save_grouping(assignment: PredicateGroupAssignment, path: str | Path) -> None:
    data = {"mu": assignment.mu, "groups": [list(g) for g in assignment.groups]}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_grouping(path: str | Path) -> PredicateGroupAssignment:
    data = json.loads(Path(path).read_text())
    return PredicateGroupAssignment(tuple(tuple(g) for g in data["groups"]), data.get("mu"))


def save_confusion_csv(confusion: ConfusionMatrix, path: str | Path) -> None:
    lines = ["," + ",".join(_csv_field(l) for l in confusion.labels)]
    for label, row in zip(confusion.labels, confusion.values):
        lines.append(_csv_field(label) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_confusion_csv(path: str | Path) -> ConfusionMatrix:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = tuple(rows[0][1:])
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ConfusionMatrix(labels, values)


def _csv_field(text: str) -> str:
    if any(c in text for c in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text
