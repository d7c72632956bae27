"""In-memory wiring from scenes to an evaluation report.

The workbench persists every intermediate; this module holds the pure steps
it calls so that ablations can reuse one feature extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import EvalReport, ImageResult, evaluate
from .features import FeatureBank, SceneFeatures, build_bank, class_embedding_table, extract_scene_features
from .grouping import (
    ConfusionMatrix,
    PredicateGroupAssignment,
    PredicateStats,
    build_confusion,
    group_predicates,
    initial_grouping,
)
from .mask_ops import Scene
from .model import FEATURE_KINDS, FusionConfig, StackSpec, as_tensors, forward_logits, gather_batch
from .sampling import Instance, SamplingPlan, build_plan
from .trainer import Checkpoint, TrainConfig, pair_probabilities, rank_pairs, train


@dataclass
class Prepared:
    """Everything derived from the dataset that does not depend on model settings."""

    train_bank: FeatureBank
    test_bank: FeatureBank
    class_names: list[str]
    class_table: np.ndarray
    train_instances: list[Instance]
    train_scenes: list[Scene]
    test_scenes: list[Scene]
    tiers: dict[str, str]

    @property
    def vocabulary(self) -> list[str]:
        return list(self.tiers)

    def train_counts(self) -> dict[str, int]:
        counts = {p: 0 for p in self.tiers}
        for inst in self.train_instances:
            counts[inst.predicate] += 1
        return counts

    def stats(self) -> PredicateStats:
        return PredicateStats.from_counts(self.train_counts())

    def train_triples(self) -> set[tuple[str, str, str]]:
        out = set()
        for scene in self.train_scenes:
            labels = {o.id: o.label for o in scene.objects}
            out |= {(labels[t.subject], t.predicate, labels[t.object]) for t in scene.triplets}
        return out


def instances_of(scenes: list[Scene], bank: FeatureBank) -> list[Instance]:
    out = []
    for s, scene in enumerate(scenes):
        for t in scene.triplets:
            out.append(Instance(s, bank.slot_of(s, t.subject), bank.slot_of(s, t.object), t.predicate))
    return out


def prepare(
    train_scenes: list[Scene],
    test_scenes: list[Scene],
    class_names: list[str],
    tiers: dict[str, str],
    embed_seed: int = 0,
    train_features: list[SceneFeatures] | None = None,
    test_features: list[SceneFeatures] | None = None,
) -> Prepared:
    train_features = train_features or [extract_scene_features(s) for s in train_scenes]
    test_features = test_features or [extract_scene_features(s) for s in test_scenes]
    n_max = max(len(f.object_ids) for f in train_features + test_features)
    train_bank = build_bank(train_features, class_names, n_max)
    test_bank = build_bank(test_features, class_names, n_max)
    table = class_embedding_table(class_names, embed_seed)
    return Prepared(
        train_bank, test_bank, list(class_names), table, instances_of(train_scenes, train_bank), train_scenes, test_scenes, dict(tiers)
    )


@dataclass(frozen=True)
class Setting:
    """One point of the configuration space compared by the ablations."""

    features: tuple[str, ...] = FEATURE_KINDS
    fusion: str = "entangled"
    key_set: str = "scene"
    grouping: str = "cognition"
    sampling: str = "both"
    lam: float = 0.5
    transfer: str = "topdown"
    alpha: float = 1.0
    mu: float = 0.8
    curriculum: bool = True
    epochs: int = 12
    bootstrap_epochs: int = 2
    lr: float = 0.03
    seed: int = 0
    stop_teacher_grad: bool = True


def baseline_setting(base: Setting) -> Setting:
    """Single classifier on stage-1 (bbox) features, full space, plain CE, no resampling."""
    return replace(base, features=("bbox",), curriculum=False, sampling="none", alpha=0.0)


def stage_of(feature_set: tuple[str, ...]) -> int:
    if "boundary" in feature_set:
        return 3
    if "mask" in feature_set:
        return 2
    return 1


def predict_instances(ckpt: Checkpoint, bank: FeatureBank, class_table, instances: list[Instance], features) -> np.ndarray:
    """Final-head argmax label index for each instance."""
    out = []
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    tensors = as_tensors(params, trainable=False)
    for start in range(0, len(instances), 512):
        chunk = instances[start : start + 512]
        batch = gather_batch(
            bank,
            class_table,
            np.array([i.image for i in chunk]),
            np.array([i.subject for i in chunk]),
            np.array([i.object for i in chunk]),
            features,
        )
        out.append(np.argmax(forward_logits(tensors, batch, ckpt.spec)[-1].value, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def bootstrap_confusion(prep: Prepared, setting: Setting) -> ConfusionMatrix:
    """Confusion of a short stage-1-only model over the full space, on training instances."""
    stats = prep.stats()
    labels = list(stats.predicates)
    spec = StackSpec(FusionConfig(setting.fusion, seed=setting.seed, key_set=setting.key_set), (1,), (len(labels),))
    plan = build_plan(prep.train_instances, [tuple(labels)], {p: 1 for p in labels}, setting.lam, setting.seed, "none")
    cfg = TrainConfig(
        alpha=0.0, transfer="topdown", epochs=setting.bootstrap_epochs, lr=setting.lr, seed=setting.seed, features=("bbox",)
    )
    ckpt = train(prep.train_bank, prep.class_table, prep.train_instances, plan, spec, labels, cfg)
    pred = predict_instances(ckpt, prep.train_bank, prep.class_table, prep.train_instances, ("bbox",))
    pairs = [(inst.predicate, labels[p]) for inst, p in zip(prep.train_instances, pred)]
    return build_confusion(pairs, labels)


@dataclass
class RunResult:
    setting: Setting
    report: EvalReport
    checkpoint: Checkpoint
    assignment: PredicateGroupAssignment | None
    plan: SamplingPlan
    extra: dict = field(default_factory=dict)


def curriculum_layout(stats: PredicateStats, assignment: PredicateGroupAssignment):
    """Label order, nested stage spaces and group lookup implied by ``assignment``."""
    order = assignment.label_order(stats)
    spaces = [tuple(order[: len(s)]) for s in assignment.spaces]
    group_of = {p: assignment.group_of(p) for p in order}
    return order, spaces, group_of


def configure(prep: Prepared, setting: Setting, confusion: ConfusionMatrix | None, t2: int = 2, t3: int = 3):
    """Grouping, label order, classifier spec and sampling plan for ``setting``."""
    stats = prep.stats()
    fusion = FusionConfig(setting.fusion, seed=setting.seed, key_set=setting.key_set)
    if setting.curriculum:
        assignment = group_predicates(stats, confusion, setting.mu, 3, setting.grouping, setting.seed)
        order, spaces, group_of = curriculum_layout(stats, assignment)
        spec = StackSpec(fusion, (1, 2, 3), tuple(len(s) for s in spaces))
    else:
        assignment = None
        order = list(stats.predicates)
        spaces = [tuple(order)]
        base = initial_grouping(stats, 3)
        group_of = {p: base.group_of(p) for p in order}
        spec = StackSpec(fusion, (stage_of(setting.features),), (len(order),))
    plan = build_plan(prep.train_instances, spaces, group_of, setting.lam, setting.seed, setting.sampling, t2, t3)
    return assignment, order, spec, plan


def train_config(setting: Setting) -> TrainConfig:
    return TrainConfig(
        alpha=setting.alpha,
        transfer=setting.transfer,
        stop_teacher_grad=setting.stop_teacher_grad,
        epochs=setting.epochs,
        lr=setting.lr,
        seed=setting.seed,
        features=setting.features,
    )


def image_results(ckpt: Checkpoint, bank: FeatureBank, class_table, scenes: list[Scene], graph_constraint=True) -> list[ImageResult]:
    out = []
    for s, scene in enumerate(scenes):
        pairs, probs = pair_probabilities(ckpt, bank, class_table, s)
        preds = rank_pairs(pairs, probs, bank.object_ids[s], ckpt.label_order, graph_constraint)
        out.append(
            ImageResult(
                [(p.subject, p.object, p.predicate) for p in preds],
                [(t.subject, t.object, t.predicate) for t in scene.triplets],
                {o.id: o.label for o in scene.objects},
            )
        )
    return out


def run_setting(prep: Prepared, setting: Setting, confusion: ConfusionMatrix | None = None) -> RunResult:
    if setting.curriculum and setting.grouping == "cognition" and confusion is None:
        confusion = bootstrap_confusion(prep, setting)
    assignment, order, spec, plan = configure(prep, setting, confusion)
    cfg = train_config(setting)
    ckpt = train(prep.train_bank, prep.class_table, prep.train_instances, plan, spec, order, cfg)
    images = image_results(ckpt, prep.test_bank, prep.class_table, prep.test_scenes)
    report = evaluate(images, prep.train_counts(), prep.train_triples(), prep.vocabulary)
    return RunResult(setting, report, ckpt, assignment, plan)


def tier_mean_recall(report: EvalReport, tiers: dict[str, str], tier: str) -> float:
    members = [p for p, t in tiers.items() if t == tier]
    return float(np.mean([report.per_predicate_recall[p] for p in members]))

