"""Curricular training of the classifier stack with sliced distillation.

Head k predicts over the first ``|R~k|`` labels of the global label order, so
a higher head's distribution restricted to a lower head's space is a prefix
slice. The total objective is ``L_ce + alpha * L_kl``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .features import FeatureBank
from .model import FEATURE_KINDS, FusionConfig, StackSpec, as_tensors, forward_logits, gather_batch, init_params
from .sampling import Instance, SamplingPlan, draw_epoch

TRANSFER_MODES = ("neighbor", "topdown", "bidir")


class TrainingDiverged(RuntimeError):
    pass


def transfer_pairs(mode: str, stages: int = 3) -> list[tuple[int, int]]:
    """Ordered (teacher, student) stage pairs; reversed pairs distil downwards."""
    if mode == "neighbor":
        return [(k, k + 1) for k in range(1, stages)]
    top_down = [(a, b) for a in range(1, stages + 1) for b in range(a + 1, stages + 1)]
    if mode == "topdown":
        return top_down
    if mode == "bidir":
        return top_down + [(b, a) for a, b in top_down]
    raise ValueError(f"unknown transfer mode {mode!r}")


# --- numpy reference forms --------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_stage(features: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Class probabilities of one head for a (B, d) block of stage features."""
    if features.shape[-1] != weight.shape[0]:
        raise ValueError("feature dimension does not match the classifier")
    return softmax(features @ weight + bias)


def slice_distribution(p: np.ndarray, size: int) -> tuple[np.ndarray, bool]:
    """First ``size`` entries renormalised; returns (distribution, used_fallback)."""
    head = np.asarray(p, dtype=np.float64)[..., :size]
    total = head.sum(axis=-1, keepdims=True)
    degenerate = total < 1e-12
    out = np.where(degenerate, 1.0 / size, head / np.where(degenerate, 1.0, total))
    return out, bool(np.any(degenerate))


def ce_loss(stage_probs: list[np.ndarray], labels: np.ndarray) -> float:
    """Sum over stages of the mean -log p[gt] over instances whose label fits the stage."""
    labels = np.asarray(labels)
    if np.any(labels >= stage_probs[-1].shape[-1]) or np.any(labels < 0):
        raise ValueError("label outside the final classification space")
    total = 0.0
    for probs in stage_probs:
        keep = labels < probs.shape[-1]
        if keep.any():
            rows = np.flatnonzero(keep)
            total += float(-np.log(probs[rows, labels[rows]]).mean())
    return total


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl_loss(stage_probs: list[np.ndarray], pairs: list[tuple[int, int]]) -> float:
    """Mean over transfer pairs of the batch-mean KL(teacher || student) on the smaller space."""
    if not pairs:
        return 0.0
    total = 0.0
    for teacher, student in pairs:
        lo, hi = min(teacher, student), max(teacher, student)
        size = stage_probs[lo - 1].shape[-1]
        low = stage_probs[lo - 1]
        high, _ = slice_distribution(stage_probs[hi - 1], size)
        if teacher < student:
            total += float(kl_divergence(low, high).mean())
        else:
            total += float(kl_divergence(high, low).mean())
    return total / len(pairs)


# --- differentiable objective -----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    transfer: str = "topdown"
    stop_teacher_grad: bool = True
    lr: float = 0.03
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 12
    warmup: float = 0.05
    decay_at: float = 0.7
    seed: int = 0
    features: tuple[str, ...] = FEATURE_KINDS
    max_steps: int | None = None  # caps the epoch-derived step count

    def __post_init__(self):
        if self.transfer not in TRANSFER_MODES:
            raise ValueError(f"unknown transfer mode {self.transfer!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not set(self.features) <= set(FEATURE_KINDS):
            raise ValueError(f"feature kinds are {FEATURE_KINDS}")


def objective(
    params: dict[str, ad.Tensor],
    batch,
    labels: np.ndarray,
    ce_rows: list[np.ndarray],
    spec: StackSpec,
    alpha: float,
    pairs: list[tuple[int, int]],
    stop_teacher_grad: bool = True,
) -> tuple[ad.Tensor, float, float]:
    """L_ce + alpha * L_kl as a tensor, plus the two terms as floats.

    ``ce_rows[h]`` lists the batch rows that train head h with cross-entropy.
    KL terms average over every row of the batch.
    """
    logits = forward_logits(params, batch, spec)
    logp = [ad.log_softmax(l) for l in logits]
    total = None
    ce_value = 0.0
    for h, rows in enumerate(ce_rows):
        rows = rows[labels[rows] < spec.head_sizes[h]]
        if len(rows) == 0:
            continue
        weights = np.zeros(len(labels))
        weights[rows] = 1.0 / len(rows)
        term = ad.nll(logp[h], np.where(weights > 0, labels, 0), weights)
        ce_value += float(term.value)
        total = term if total is None else ad.add(total, term)
    kl_value = 0.0
    if alpha > 0 and pairs and len(spec.head_stages) > 1:
        row_w = np.full(len(labels), 1.0 / (len(labels) * len(pairs)))
        kl_total = None
        for teacher, student in pairs:
            lo, hi = min(teacher, student) - 1, max(teacher, student) - 1
            size = spec.head_sizes[lo]
            low = logp[lo]
            high = ad.log_softmax(ad.slice_last(logits[hi], size))
            t, s = (low, high) if teacher < student else (high, low)
            if stop_teacher_grad:
                t = ad.detach(t)
            term = ad.kl_rows(t, s, row_w)
            kl_total = term if kl_total is None else ad.add(kl_total, term)
        kl_value = float(kl_total.value)
        weighted = ad.scale(kl_total, alpha)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        total = ad.constant(0.0)
    return total, ce_value, kl_value


def loss_and_grads(params: dict[str, np.ndarray], *args, **kwargs):
    tensors = as_tensors(params)
    total, ce, kl = objective(tensors, *args, **kwargs)
    if total.requires_grad:
        total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
    return float(total.value), ce, kl, grads


# --- training loop ----------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    spec: StackSpec
    label_order: list[str]
    config: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)


def learning_rate(step: int, total: int, cfg: TrainConfig) -> float:
    warm = max(1, int(round(cfg.warmup * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if step >= int(cfg.decay_at * total):
        return cfg.lr * 0.1
    return cfg.lr


class _Stream:
    def __init__(self, plan, stage, instances, rng):
        self.plan, self.stage, self.instances, self.rng = plan, stage, instances, rng
        self.items: list[Instance] = []
        self.pos = 0
        self.refill()

    def refill(self):
        self.items = draw_epoch(self.plan, self.stage, self.instances, self.rng)
        self.pos = 0

    def take(self, n):
        out = []
        while len(out) < n:
            if self.pos >= len(self.items):
                self.refill()
                if not self.items:
                    break
            out.append(self.items[self.pos])
            self.pos += 1
        return out


def train(
    bank: FeatureBank,
    class_table: np.ndarray,
    instances: list[Instance],
    plan: SamplingPlan,
    spec: StackSpec,
    label_order: list[str],
    cfg: TrainConfig,
    log_sink=None,
) -> Checkpoint:
    """Joint training of all heads; head h draws from the stage-``h+1`` stream of ``plan``.

    An epoch is ``ceil(len(instances) / batch_size)`` steps whatever the
    sampling mode, so resampling changes the mix and not the budget.
    """
    label_pos = {r: i for i, r in enumerate(label_order)}
    params = init_params(spec)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n_heads = len(spec.head_sizes)
    streams = [_Stream(plan, h + 1, instances, rng) for h in range(n_heads)]
    per_epoch = max(1, math.ceil(len(instances) / cfg.batch_size))
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    pairs = transfer_pairs(cfg.transfer, n_heads) if n_heads > 1 else []
    log: list[dict] = []
    for step in range(total_steps):
        chunks = [s.take(cfg.batch_size) for s in streams]
        picked = [inst for chunk in chunks for inst in chunk]
        if not picked:
            break
        ce_rows, start = [], 0
        for chunk in chunks:
            ce_rows.append(np.arange(start, start + len(chunk)))
            start += len(chunk)
        batch = gather_batch(
            bank,
            class_table,
            np.array([i.image for i in picked]),
            np.array([i.subject for i in picked]),
            np.array([i.object for i in picked]),
            cfg.features,
        )
        labels = np.array([label_pos[i.predicate] for i in picked])
        loss, ce, kl, grads = loss_and_grads(
            params, batch, labels, ce_rows, spec, cfg.alpha, pairs, cfg.stop_teacher_grad
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (ce={ce}, kl={kl})")
        lr = learning_rate(step, total_steps, cfg)
        for k in params:
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            params[k] = params[k] - lr * velocity[k]
        record = {"step": step, "L_ce": ce, "L_kl": kl, "lr": lr}
        log.append(record)
        if log_sink is not None:
            log_sink.write(json.dumps(record) + "\n")
    config = {
        "fusion": spec.fusion.strategy,
        "key_set": spec.fusion.key_set,
        "heads": spec.fusion.heads,
        "model_dim": spec.fusion.model_dim,
        "head_stages": list(spec.head_stages),
        "head_sizes": list(spec.head_sizes),
        "transfer": cfg.transfer,
        "alpha": cfg.alpha,
        "lambda": plan.lam,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "features": list(cfg.features),
        "stop_teacher_grad": cfg.stop_teacher_grad,
    }
    return Checkpoint({k: v.astype(np.float32) for k, v in params.items()}, spec, list(label_order), config, log)


def spec_from_config(config: dict, seed: int | None = None) -> StackSpec:
    fusion = FusionConfig(
        config["fusion"], config["heads"], config["model_dim"], config.get("seed", 0) if seed is None else seed, config["key_set"]
    )
    return StackSpec(fusion, tuple(config["head_stages"]), tuple(config["head_sizes"]))


# --- inference --------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    subject: int  # object id
    object: int
    predicate: str
    score: float
    label_index: int


def pair_probabilities(ckpt: Checkpoint, bank: FeatureBank, class_table: np.ndarray, scene: int, features=None):
    """Final-head probabilities for every ordered pair of valid objects in ``scene``."""
    n = int(bank.valid[scene].sum())
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    if not pairs:
        return pairs, np.zeros((0, ckpt.spec.head_sizes[-1]))
    features = tuple(ckpt.config.get("features", FEATURE_KINDS)) if features is None else features
    batch = gather_batch(
        bank, class_table, np.full(len(pairs), scene), np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]), features
    )
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    logits = forward_logits(as_tensors(params, trainable=False), batch, ckpt.spec)[-1].value
    return pairs, softmax(logits)


def rank_pairs(pairs, probs, object_ids, label_order, graph_constraint: bool = True) -> list[Prediction]:
    """Ranked predictions; ties broken by (subject id, object id, label index)."""
    preds = []
    for (i, j), p in zip(pairs, probs):
        s, o = int(object_ids[i]), int(object_ids[j])
        if graph_constraint:
            c = int(np.argmax(p))
            preds.append(Prediction(s, o, label_order[c], float(p[c]), c))
        else:
            preds.extend(Prediction(s, o, label_order[c], float(p[c]), c) for c in range(len(p)))
    preds.sort(key=lambda r: (-r.score, r.subject, r.object, r.label_index))
    return preds


def infer(ckpt: Checkpoint, bank: FeatureBank, class_table: np.ndarray, scene: int, graph_constraint: bool = True) -> list[Prediction]:
    pairs, probs = pair_probabilities(ckpt, bank, class_table, scene)
    return rank_pairs(pairs, probs, bank.object_ids[scene], ckpt.label_order, graph_constraint)


def with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(cfg, epochs=epochs)
