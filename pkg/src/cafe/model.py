"""Stage-wise relation features, fusion strategies and the classifier stack.

Object path (shared by all stages)::

    F1_i  = tanh(A(v_i ++ g_i))                   object encoder, stage 1
    R1_i  = tanh(A(v_i ++ F1_i ++ w_i))           refined object feature, stage 1
    R2_i  = tanh(A(v_i ++ F1_i ++ w_i ++ fm_i))   refined object feature, stages 2-3

Relation features::

    rel1_ij = tanh(A(R1_i ++ R1_j)) * tanh(A(u_ij))
    rel2_ij = tanh(A(R2_i ++ R2_j)) * tanh(A(u_ij))
    rel3_ij = one of the fusion strategies below

``A`` is an affine map; every map has its own parameters. Attention keys for
``MH(., R2, R2)`` are the refined features of all objects in the scene (or
only the two endpoints, with ``key_set="endpoints"``). Pair-level key sets
(``rel2_ij`` or the projected boundary descriptor) hold a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .features import GEOM_DIM, VISUAL_DIM, WORD_DIM, FeatureBank
from .zernike import DESCRIPTOR_DIM

STRATEGIES = ("concat", "joint", "divided", "entangled")
KEY_SETS = ("scene", "endpoints")
_MH_BLOCKS = {
    "concat": (),
    "joint": ("mh_joint",),
    "divided": ("mh_rel", "mh_bnd"),
    "entangled": ("mh_a", "mh_im", "mh_id", "mh_out_d", "mh_out_m"),
}


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "entangled"
    heads: int = 4
    model_dim: int = 64
    seed: int = 0
    key_set: str = "scene"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.key_set not in KEY_SETS:
            raise ValueError(f"unknown key set {self.key_set!r}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


@dataclass(frozen=True)
class StackSpec:
    """Classifier heads: head h reads stage ``head_stages[h]`` features and has ``head_sizes[h]`` outputs."""

    fusion: FusionConfig = field(default_factory=FusionConfig)
    head_stages: tuple[int, ...] = (1, 2, 3)
    head_sizes: tuple[int, ...] = (4, 8, 12)

    def __post_init__(self):
        if len(self.head_stages) != len(self.head_sizes) or not self.head_stages:
            raise ValueError("head_stages and head_sizes must be non-empty and aligned")
        if any(s not in (1, 2, 3) for s in self.head_stages):
            raise ValueError("feature stages are 1, 2 or 3")
        if list(self.head_sizes) != sorted(set(self.head_sizes)):
            raise ValueError("head output spaces must strictly grow")

    @property
    def max_stage(self) -> int:
        return max(self.head_stages)


def _affine_shapes(d: int) -> dict[str, tuple[int, int]]:
    return {
        "enc1_obj": (VISUAL_DIM + GEOM_DIM, d),
        "enc1_rel": (VISUAL_DIM + d + WORD_DIM, d),
        "proj1": (2 * d, d),
        "proj1_u": (VISUAL_DIM, d),
        "enc2_rel": (VISUAL_DIM + d + WORD_DIM + DESCRIPTOR_DIM, d),
        "proj2": (2 * d, d),
        "proj2_u": (VISUAL_DIM, d),
        "proj3": (2 * d, d),
        "proj3_u": (VISUAL_DIM + DESCRIPTOR_DIM, d),
        "bproj": (DESCRIPTOR_DIM, d),
    }


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: StackSpec, strategies: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    """Seeded parameters for ``spec``; ``strategies`` adds blocks of other fusion strategies too."""
    fusion = spec.fusion
    d = fusion.model_dim
    rng = np.random.default_rng(fusion.seed)
    strategies = strategies or (fusion.strategy,)
    shapes = _affine_shapes(d)
    names = ["enc1_obj", "enc1_rel", "proj1", "proj1_u"]
    if spec.max_stage >= 2:
        names += ["enc2_rel", "proj2", "proj2_u"]
    if spec.max_stage >= 3:
        if "concat" in strategies:
            names += ["proj3", "proj3_u"]
        if any(s != "concat" for s in strategies):
            names += ["bproj"]
    params: dict[str, np.ndarray] = {}
    for name in names:
        fan_in, fan_out = shapes[name]
        params[f"{name}.w"] = _uniform(rng, fan_in, (fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    if spec.max_stage >= 3:
        for strategy in strategies:
            for block in _MH_BLOCKS[strategy]:
                for part in ("q", "k", "v", "o"):
                    params[f"{block}.{part}"] = _uniform(rng, d, (d, d))
    for h, size in enumerate(spec.head_sizes):
        params[f"cls{h + 1}.w"] = _uniform(rng, d, (d, size))
        params[f"cls{h + 1}.b"] = np.zeros(size)
    return params


@dataclass
class Batch:
    visual: np.ndarray  # (B, n, 32)
    geom: np.ndarray  # (B, n, 8)
    word: np.ndarray  # (B, n, 16)
    mask_desc: np.ndarray  # (B, n, 256)
    valid: np.ndarray  # (B, n)
    subj: np.ndarray  # (B,)
    obj: np.ndarray  # (B,)
    union: np.ndarray  # (B, 32)
    boundary: np.ndarray  # (B, 256)

    def __len__(self):
        return len(self.subj)


FEATURE_KINDS = ("bbox", "mask", "boundary")


def gather_batch(
    bank: FeatureBank,
    class_table: np.ndarray,
    scene: np.ndarray,
    subj: np.ndarray,
    obj: np.ndarray,
    features: frozenset[str] | tuple[str, ...] = FEATURE_KINDS,
) -> Batch:
    """Inputs for relation instances (scene index, subject slot, object slot).

    Feature kinds left out of ``features`` are zeroed, which is how the
    feature ablations switch inputs off.
    """
    scene = np.asarray(scene, dtype=np.int64)
    subj = np.asarray(subj, dtype=np.int64)
    obj = np.asarray(obj, dtype=np.int64)
    rows = bank.pair_row[scene, subj, obj]
    if np.any(rows < 0):
        raise ValueError("instance refers to a missing object pair")
    geom = bank.geom[scene]
    mask_desc = bank.mask_desc[scene]
    boundary = bank.boundary_desc[rows]
    if "bbox" not in features:
        geom = np.zeros_like(geom)
    if "mask" not in features:
        mask_desc = np.zeros_like(mask_desc)
    if "boundary" not in features:
        boundary = np.zeros_like(boundary)
    return Batch(
        visual=bank.visual[scene],
        geom=geom,
        word=class_table[bank.class_index[scene]],
        mask_desc=mask_desc,
        valid=bank.valid[scene],
        subj=subj,
        obj=obj,
        union=bank.union_visual[rows],
        boundary=boundary,
    )


def _dense(p, name, x):
    return ad.tanh(ad.linear(x, p[f"{name}.w"], p[f"{name}.b"]))


def multi_head(p, block: str, query: ad.Tensor, keys: ad.Tensor, mask: np.ndarray, heads: int) -> ad.Tensor:
    """MH(query, keys, keys): query (B, d), keys (B, n, d), mask (B, n)."""
    B, n, d = keys.shape
    dh = d // heads
    q = ad.reshape(ad.linear(query, p[f"{block}.q"]), (B, heads, dh))
    k = ad.reshape(ad.linear(keys, p[f"{block}.k"]), (B, n, heads, dh))
    v = ad.reshape(ad.linear(keys, p[f"{block}.v"]), (B, n, heads, dh))
    out = ad.attention(q, k, v, mask)
    return ad.linear(ad.reshape(out, (B, d)), p[f"{block}.o"])


def _single(x: ad.Tensor) -> tuple[ad.Tensor, np.ndarray]:
    B, d = x.shape
    return ad.reshape(x, (B, 1, d)), np.ones((B, 1), dtype=bool)


def forward_features(p: dict[str, ad.Tensor], batch: Batch, spec: StackSpec) -> dict[str, ad.Tensor]:
    """Object and relation features up to ``spec.max_stage`` as autodiff tensors."""
    fusion = spec.fusion
    visual = ad.constant(batch.visual)
    word = ad.constant(batch.word)
    out: dict[str, ad.Tensor] = {}

    f1 = _dense(p, "enc1_obj", ad.concat([visual, ad.constant(batch.geom)]))
    r1 = _dense(p, "enc1_rel", ad.concat([visual, f1, word]))
    union = ad.constant(batch.union)
    out["F1"], out["R1"] = f1, r1
    out["rel1"] = ad.mul(
        _dense(p, "proj1", ad.concat([ad.take_rows(r1, batch.subj), ad.take_rows(r1, batch.obj)])),
        _dense(p, "proj1_u", union),
    )
    if spec.max_stage < 2:
        return out

    r2 = _dense(p, "enc2_rel", ad.concat([visual, f1, word, ad.constant(batch.mask_desc)]))
    r2_s, r2_o = ad.take_rows(r2, batch.subj), ad.take_rows(r2, batch.obj)
    rel2 = ad.mul(_dense(p, "proj2", ad.concat([r2_s, r2_o])), _dense(p, "proj2_u", union))
    out["R2"], out["rel2"] = r2, rel2
    if spec.max_stage < 3:
        return out

    boundary = ad.constant(batch.boundary)
    if fusion.strategy == "concat":
        out["rel3"] = ad.mul(
            _dense(p, "proj3", ad.concat([r2_s, r2_o])),
            _dense(p, "proj3_u", ad.concat([union, boundary])),
        )
        return out

    heads = fusion.heads
    if fusion.key_set == "scene":
        key_mask = batch.valid
    else:
        key_mask = np.zeros_like(batch.valid)
        rows = np.arange(len(batch))
        key_mask[rows, batch.subj] = True
        key_mask[rows, batch.obj] = True
    pb = _dense(p, "bproj", boundary)
    if fusion.strategy == "joint":
        rel3 = multi_head(p, "mh_joint", ad.add(rel2, pb), r2, key_mask, heads)
    elif fusion.strategy == "divided":
        rel3 = ad.add(
            multi_head(p, "mh_rel", rel2, r2, key_mask, heads),
            multi_head(p, "mh_bnd", pb, r2, key_mask, heads),
        )
    else:
        rel2_keys, one = _single(rel2)
        pb_keys, _ = _single(pb)
        a = multi_head(p, "mh_a", rel2, r2, key_mask, heads)
        i_m = multi_head(p, "mh_im", a, rel2_keys, one, heads)
        i_d = multi_head(p, "mh_id", a, pb_keys, one, heads)
        rel3 = ad.add(
            multi_head(p, "mh_out_d", i_d, rel2_keys, one, heads),
            multi_head(p, "mh_out_m", i_m, pb_keys, one, heads),
        )
    out["rel3"] = rel3
    return out


def forward_logits(p: dict[str, ad.Tensor], batch: Batch, spec: StackSpec) -> list[ad.Tensor]:
    feats = forward_features(p, batch, spec)
    return [
        ad.linear(feats[f"rel{stage}"], p[f"cls{h + 1}.w"], p[f"cls{h + 1}.b"])
        for h, stage in enumerate(spec.head_stages)
    ]


def as_tensors(params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, ad.Tensor]:
    make = ad.parameter if trainable else ad.constant
    return {k: make(v) for k, v in params.items()}


def predict_logits(params: dict[str, np.ndarray], batch: Batch, spec: StackSpec) -> list[np.ndarray]:
    return [t.value for t in forward_logits(as_tensors(params, trainable=False), batch, spec)]


@dataclass
class StageFeatures:
    stage: int
    object_features: dict[int, np.ndarray]
    relation_features: dict[tuple[int, int], np.ndarray]


def encode_stage(
    params: dict[str, np.ndarray],
    bank: FeatureBank,
    class_table: np.ndarray,
    scene: int,
    stage: int,
    fusion: FusionConfig,
    features=FEATURE_KINDS,
) -> StageFeatures:
    """Stage-``stage`` features for every ordered object pair of one scene."""
    n = int(bank.valid[scene].sum())
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    if not pairs:
        raise ValueError("scene needs at least two objects")
    subj = np.array([i for i, _ in pairs])
    obj = np.array([j for _, j in pairs])
    batch = gather_batch(bank, class_table, np.full(len(pairs), scene), subj, obj, features)
    spec = StackSpec(fusion, (stage,), (1,))
    feats = forward_features(as_tensors(params, trainable=False), batch, spec)
    obj_key = {1: "R1", 2: "R2", 3: "R2"}[stage]
    ids = bank.object_ids[scene]
    objects = {int(ids[i]): feats[obj_key].value[0, i].copy() for i in range(n)}
    rel = feats[f"rel{stage}"].value
    relations = {(int(ids[i]), int(ids[j])): rel[r].copy() for r, (i, j) in enumerate(pairs)}
    return StageFeatures(stage, objects, relations)


def encode_stage1(params, bank, class_table, scene, fusion=FusionConfig(), features=FEATURE_KINDS) -> StageFeatures:
    return encode_stage(params, bank, class_table, scene, 1, fusion, features)


def encode_stage2(params, bank, class_table, scene, fusion=FusionConfig(), features=FEATURE_KINDS) -> StageFeatures:
    return encode_stage(params, bank, class_table, scene, 2, fusion, features)


def encode_stage3(params, bank, class_table, scene, fusion=FusionConfig(), features=FEATURE_KINDS) -> StageFeatures:
    return encode_stage(params, bank, class_table, scene, 3, fusion, features)
