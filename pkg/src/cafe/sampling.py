"""Two-fold predicate balancing: image repeats plus per-stage median resampling.

``phi`` is a multiplicative draw weight. Within the stage-k space, with
Med/Max the (lower) median and maximum count::

    phi1 = cnt / Med                      if cnt >= Med else 1
    phi2 = (Max - cnt) / (Max - Med)      if cnt >= Med
         = (Max - cnt) / (Max - Med) * k2 otherwise, k2 = k**2
    phi  = lam * phi1 + (1 - lam) * phi2,  clamped to [0.05, 20]

With Max == Med, phi2 is taken as 1 for every predicate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PHI_MIN, PHI_MAX = 0.05, 20.0


def lower_median(values) -> float:
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def raw_stage_rates(counts: dict[str, int], k: int, lam: float) -> dict[str, float]:
    """phi before clamping, for predicates with positive count."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    present = {r: c for r, c in counts.items() if c > 0}
    if not present:
        raise ValueError("empty classification space")
    med = lower_median(present.values())
    mx = float(max(present.values()))
    out = {}
    for r, cnt in present.items():
        phi1 = cnt / med if cnt >= med else 1.0
        if mx == med:
            phi2 = 1.0
        else:
            phi2 = (mx - cnt) / (mx - med) * (1 if cnt >= med else k * k)
        out[r] = lam * phi1 + (1.0 - lam) * phi2
    return out


def compute_stage_rates(counts: dict[str, int], k: int, lam: float) -> dict[str, float]:
    """Clamped per-predicate rates over the stage-k space (``counts`` restricted to it)."""
    return {r: min(max(v, PHI_MIN), PHI_MAX) for r, v in raw_stage_rates(counts, k, lam).items()}


@dataclass(frozen=True)
class Instance:
    image: int  # scene index within the training set
    subject: int  # object slot
    object: int
    predicate: str


@dataclass
class SamplingPlan:
    image_repeats: dict[int, int]
    stage_rates: list[dict[str, float]]  # index k-1
    stage_spaces: list[tuple[str, ...]]
    lam: float
    seed: int
    mode: str = "both"
    meta: dict = field(default_factory=dict)

    def expected_copies(self, inst: Instance, k: int) -> float:
        if inst.predicate not in self.stage_spaces[k - 1]:
            return 0.0
        return self.stage_rates[k - 1].get(inst.predicate, 1.0) * self.image_repeats.get(inst.image, 1)


def plan_image_oversampling(
    image_predicates: dict[int, set[str]], group_of: dict[str, int], t2: int = 2, t3: int = 3
) -> dict[int, int]:
    """Repeat factor per image from the hardest group it contains."""
    factor = {1: 1, 2: t2, 3: t3}
    out = {}
    for image, preds in image_predicates.items():
        hardest = max((group_of[p] for p in preds), default=1)
        out[image] = factor.get(min(hardest, 3), 1)
    return out


def build_plan(
    instances: list[Instance],
    spaces: list[tuple[str, ...]],
    group_of: dict[str, int],
    lam: float = 0.5,
    seed: int = 0,
    mode: str = "both",
    t2: int = 2,
    t3: int = 3,
) -> SamplingPlan:
    """``mode``: none | over (image repeats only) | median (rates only) | both."""
    if mode not in ("none", "over", "median", "both"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    images: dict[int, set[str]] = {}
    for inst in instances:
        images.setdefault(inst.image, set()).add(inst.predicate)
    if mode in ("over", "both"):
        repeats = plan_image_oversampling(images, group_of, t2, t3)
    else:
        repeats = {i: 1 for i in images}
    counts_all: dict[str, int] = {}
    for inst in instances:
        counts_all[inst.predicate] = counts_all.get(inst.predicate, 0) + 1
    rates = []
    for k, space in enumerate(spaces, start=1):
        counts = {r: counts_all.get(r, 0) for r in space}
        if mode in ("median", "both") and any(counts.values()):
            rates.append(compute_stage_rates(counts, k, lam))
        else:
            rates.append({r: 1.0 for r in space})
    return SamplingPlan(repeats, rates, [tuple(s) for s in spaces], lam, seed, mode)


def draw_epoch(plan: SamplingPlan, k: int, instances: list[Instance], rng: np.random.Generator) -> list[Instance]:
    """One shuffled epoch for stage ``k`` using stochastic rounding of the expected copy counts."""
    weights = np.array([plan.expected_copies(inst, k) for inst in instances])
    whole = np.floor(weights)
    extra = rng.random(len(instances)) < (weights - whole)
    copies = (whole + extra).astype(np.int64)
    order = np.repeat(np.arange(len(instances)), copies)
    rng.shuffle(order)
    return [instances[i] for i in order]


def expected_epoch_size(plan: SamplingPlan, k: int, instances: list[Instance]) -> float:
    return float(sum(plan.expected_copies(inst, k) for inst in instances))


def expected_counts(plan: SamplingPlan, k: int, instances: list[Instance]) -> dict[str, float]:
    out: dict[str, float] = {}
    for inst in instances:
        c = plan.expected_copies(inst, k)
        if c:
            out[inst.predicate] = out.get(inst.predicate, 0.0) + c
    return out


def save_plan(plan: SamplingPlan, path: str | Path) -> None:
    data = {
        "lambda": plan.lam,
        "seed": plan.seed,
        "mode": plan.mode,
        "image_repeats": {str(k): v for k, v in sorted(plan.image_repeats.items())},
        "stage_spaces": [list(s) for s in plan.stage_spaces],
        "stage_rates": [{r: rates[r] for r in sorted(rates)} for rates in plan.stage_rates],
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_plan(path: str | Path) -> SamplingPlan:
    data = json.loads(Path(path).read_text())
    return SamplingPlan(
        {int(k): int(v) for k, v in data["image_repeats"].items()},
        [dict(r) for r in data["stage_rates"]],
        [tuple(s) for s in data["stage_spaces"]],
        float(data["lambda"]),
        int(data["seed"]),
        data.get("mode", "both"),
    )


def binomial_bound(n_instances: int, weight: float, sigmas: float = 3.0) -> tuple[float, float]:
    """Range of total copies for ``n_instances`` each drawn with stochastic rounding of ``weight``."""
    frac = weight - math.floor(weight)
    sd = math.sqrt(n_instances * frac * (1.0 - frac))
    mean = n_instances * weight
    return mean - sigmas * sd, mean + sigmas * sd
