"""Ranking metrics over per-image triplet predictions.

A triplet is ``(subject id, object id, predicate)``. Each image contributes
its ranked prediction list and its ground-truth triplets; images without
ground truth are skipped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

KS = (20, 50, 100)

Triple = tuple[int, int, str]


@dataclass
class ImageResult:
    ranked: list[Triple]  # best first
    gt: list[Triple]
    classes: dict[int, str] = field(default_factory=dict)  # object id -> class label


def _hits(image: ImageResult, k: int) -> set[Triple]:
    return set(image.ranked[:k])


def recall_at_k(images: list[ImageResult], k: int) -> float:
    values = []
    for image in images:
        if not image.gt:
            continue
        top = _hits(image, k)
        values.append(sum(t in top for t in image.gt) / len(image.gt))
    return float(np.mean(values)) if values else 0.0


def per_predicate_recall(images: list[ImageResult], k: int) -> dict[str, float]:
    """Recall per predicate: mean over images containing it of the matched fraction of its GT."""
    per: dict[str, list[float]] = {}
    for image in images:
        top = _hits(image, k)
        by_pred: dict[str, list[Triple]] = {}
        for t in image.gt:
            by_pred.setdefault(t[2], []).append(t)
        for pred, triples in by_pred.items():
            per.setdefault(pred, []).append(sum(t in top for t in triples) / len(triples))
    return {p: float(np.mean(v)) for p, v in sorted(per.items())}


def mean_recall_at_k(images: list[ImageResult], k: int) -> float:
    per = per_predicate_recall(images, k)
    return float(np.mean(list(per.values()))) if per else 0.0


def class_triple(image: ImageResult, t: Triple) -> tuple[str, str, str]:
    return image.classes[t[0]], t[2], image.classes[t[1]]


def zero_shot_recall_at_k(images: list[ImageResult], k: int, train_triples: set[tuple[str, str, str]]) -> float | None:
    """Recall over GT triplets whose class-level triple never occurs in training; None if there are none."""
    filtered = []
    for image in images:
        unseen = [t for t in image.gt if class_triple(image, t) not in train_triples]
        if unseen:
            filtered.append(ImageResult(image.ranked, unseen, image.classes))
    if not filtered:
        return None
    return recall_at_k(filtered, k)


def terciles(train_counts: dict[str, int]) -> dict[str, list[str]]:
    """Head/body/tail thirds of the predicates by training count (ties by label)."""
    ordered = sorted(train_counts, key=lambda p: (-train_counts[p], p))
    n = len(ordered)
    a, b = (n + 2) // 3, (2 * n + 2) // 3
    return {"head": ordered[:a], "body": ordered[a:b], "tail": ordered[b:]}


@dataclass
class EvalReport:
    recall: dict[int, float]
    mean_recall: dict[int, float]
    zero_shot_recall: dict[int, float | None]
    mean: float
    zs_average: float | None
    per_predicate_recall: dict[str, float]
    group_recalls: dict[str, float]
    train_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("recall", "mean_recall", "zero_shot_recall"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        for key in ("recall", "mean_recall", "zero_shot_recall"):
            d[key] = {int(k): v for k, v in d[key].items()}
        return cls(**d)


def evaluate(
    images: list[ImageResult],
    train_counts: dict[str, int],
    train_triples: set[tuple[str, str, str]],
    vocabulary: list[str],
) -> EvalReport:
    recall = {k: recall_at_k(images, k) for k in KS}
    mrecall = {k: mean_recall_at_k(images, k) for k in KS}
    zs = {k: zero_shot_recall_at_k(images, k, train_triples) for k in KS}
    mean = float(np.mean(list(recall.values()) + list(mrecall.values())))
    zs_values = [v for v in zs.values() if v is not None]
    zs_avg = float(np.mean(zs_values)) if zs_values else None
    per = per_predicate_recall(images, max(KS))
    per_full = {p: per.get(p, 0.0) for p in vocabulary}
    groups = {}
    for name, members in terciles({p: train_counts.get(p, 0) for p in vocabulary}).items():
        groups[name] = float(np.mean([per_full[p] for p in members])) if members else 0.0
    return EvalReport(recall, mrecall, zs, mean, zs_avg, per_full, groups, {p: train_counts.get(p, 0) for p in vocabulary})


def emit_report(report: EvalReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON) and a sibling per-predicate CSV."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = path.with_name(path.stem + "_per_predicate.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predicate", "train_count", "recall"])
        for p, r in report.per_predicate_recall.items():
            w.writerow([p, report.train_counts.get(p, 0), repr(r)])
    return path, csv_path


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
