"""Raw per-object and per-pair inputs for the relation model.

The CNN/RoIAlign visual feature is replaced by 32 pooled statistics of the
mask crop, and GloVe class vectors by a frozen seeded table. Both are pure
functions of the scene, so features are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mask_ops import BinaryMask, BoundingBox, Scene, contour_bits, tight_bbox
from .zernike import DESCRIPTOR_DIM, boundary_feature, mask_feature

VISUAL_DIM = 32
GEOM_DIM = 8
WORD_DIM = 16
GRID = 4


@dataclass(frozen=True)
class ObjectRaw:
    visual: np.ndarray  # (32,)
    bbox_geom: np.ndarray  # (8,)
    class_embedding: np.ndarray  # (16,)
    mask_desc: np.ndarray  # (256,)


@dataclass(frozen=True)
class PairRaw:
    union_visual: np.ndarray  # (32,)
    boundary_desc: np.ndarray  # (256,)


def _occupancy(crop: np.ndarray) -> np.ndarray:
    h, w = crop.shape
    row_cell = (np.arange(h) * GRID) // h
    col_cell = (np.arange(w) * GRID) // w
    cell_pixels = np.outer(np.bincount(row_cell, minlength=GRID), np.bincount(col_cell, minlength=GRID))
    ys, xs = np.nonzero(crop)
    counts = np.bincount(row_cell[ys] * GRID + col_cell[xs], minlength=GRID * GRID).reshape(GRID, GRID)
    with np.errstate(invalid="ignore", divide="ignore"):
        occ = np.where(cell_pixels > 0, counts / np.maximum(cell_pixels, 1), 0.0)
    return occ.ravel()


def visual_stats(bits: np.ndarray, box: BoundingBox | None = None) -> np.ndarray:
    """Pooled statistics of the foreground inside ``box`` (default: its tight box)."""
    if box is None:
        box = tight_bbox(BinaryMask(bits))
    crop = bits[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1]
    h, w = crop.shape
    area = crop.sum()
    out = np.zeros(VISUAL_DIM)
    out[0] = area / (h * w)
    ys, xs = np.nonzero(crop)
    out[1] = (xs.mean() - (w - 1) / 2.0) / w
    out[2] = (ys.mean() - (h - 1) / 2.0) / h
    out[3:19] = _occupancy(crop)
    out[19] = contour_bits(crop).sum() / area
    out[20] = w / (w + h)
    return out


def bbox_geometry(box: BoundingBox, height: int, width: int) -> np.ndarray:
    return np.array(
        [
            box.x_min / width,
            box.y_min / height,
            (box.x_max + 1) / width,
            (box.y_max + 1) / height,
            (box.x_min + box.x_max + 1) / (2.0 * width),
            (box.y_min + box.y_max + 1) / (2.0 * height),
            box.width / width,
            box.height / height,
        ]
    )


def class_embedding_table(class_names: list[str], seed: int) -> np.ndarray:
    """Frozen random word vectors, one row per class in ``class_names`` order."""
    rng = np.random.default_rng([seed, 0xC1A55])
    return rng.standard_normal((len(class_names), WORD_DIM)) / np.sqrt(WORD_DIM)


def object_raw(mask: BinaryMask, height: int, width: int, embedding: np.ndarray) -> ObjectRaw:
    box = tight_bbox(mask)
    return ObjectRaw(visual_stats(mask.bits, box), bbox_geometry(box, height, width), embedding, mask_feature(mask))


def pair_raw(a: BinaryMask, b: BinaryMask) -> PairRaw:
    box = tight_bbox(a).union(tight_bbox(b))
    return PairRaw(visual_stats(a.bits | b.bits, box), boundary_feature(a, b))


@dataclass
class SceneFeatures:
    """Raw inputs of one scene, objects in ``object_ids`` order, pairs keyed by (i, j) positions, i < j."""

    scene_id: str
    object_ids: list[int]
    classes: list[str]
    visual: np.ndarray  # (n, 32)
    geom: np.ndarray  # (n, 8)
    mask_desc: np.ndarray  # (n, 256)
    pair_keys: list[tuple[int, int]]
    union_visual: np.ndarray  # (p, 32)
    boundary_desc: np.ndarray  # (p, 256)


def extract_scene_features(scene: Scene) -> SceneFeatures:
    objs = sorted(scene.objects, key=lambda o: o.id)
    n = len(objs)
    visual = np.zeros((n, VISUAL_DIM))
    geom = np.zeros((n, GEOM_DIM))
    desc = np.zeros((n, DESCRIPTOR_DIM))
    for i, o in enumerate(objs):
        box = tight_bbox(o.mask)
        visual[i] = visual_stats(o.mask.bits, box)
        geom[i] = bbox_geometry(box, scene.height, scene.width)
        desc[i] = mask_feature(o.mask)
    keys = [(i, j) for i in range(n) for j in range(i + 1, n)]
    union = np.zeros((len(keys), VISUAL_DIM))
    bound = np.zeros((len(keys), DESCRIPTOR_DIM))
    for r, (i, j) in enumerate(keys):
        p = pair_raw(objs[i].mask, objs[j].mask)
        union[r] = p.union_visual
        bound[r] = p.boundary_desc
    return SceneFeatures(scene.scene_id, [o.id for o in objs], [o.label for o in objs], visual, geom, desc, keys, union, bound)


@dataclass
class FeatureBank:
    """Padded arrays over many scenes, ready for batched gathering.

    Object slots beyond a scene's object count are invalid (``valid`` False).
    ``pair_row[s, i, j]`` indexes the unordered-pair tables for both orders.
    """

    scene_ids: list[str]
    object_ids: np.ndarray  # (S, n_max) int, -1 padding
    valid: np.ndarray  # (S, n_max) bool
    visual: np.ndarray  # (S, n_max, 32)
    geom: np.ndarray  # (S, n_max, 8)
    mask_desc: np.ndarray  # (S, n_max, 256)
    class_index: np.ndarray  # (S, n_max) int
    pair_row: np.ndarray  # (S, n_max, n_max) int, -1 on the diagonal/padding
    union_visual: np.ndarray  # (P, 32)
    boundary_desc: np.ndarray  # (P, 256)

    def slot_of(self, scene: int, object_id: int) -> int:
        return int(np.flatnonzero(self.object_ids[scene] == object_id)[0])

    def subset(self, scene_indices) -> FeatureBank:
        idx = np.asarray(scene_indices, dtype=np.int64)
        return FeatureBank(
            [self.scene_ids[i] for i in idx],
            self.object_ids[idx],
            self.valid[idx],
            self.visual[idx],
            self.geom[idx],
            self.mask_desc[idx],
            self.class_index[idx],
            self.pair_row[idx],
            self.union_visual,
            self.boundary_desc,
        )


def build_bank(scenes: list[SceneFeatures], class_names: list[str], n_max: int | None = None) -> FeatureBank:
    n_max = n_max or max(len(s.object_ids) for s in scenes)
    S = len(scenes)
    class_pos = {c: i for i, c in enumerate(class_names)}
    object_ids = np.full((S, n_max), -1, dtype=np.int64)
    valid = np.zeros((S, n_max), dtype=bool)
    visual = np.zeros((S, n_max, VISUAL_DIM))
    geom = np.zeros((S, n_max, GEOM_DIM))
    desc = np.zeros((S, n_max, DESCRIPTOR_DIM))
    cls = np.zeros((S, n_max), dtype=np.int64)
    pair_row = np.full((S, n_max, n_max), -1, dtype=np.int64)
    unions, bounds = [], []
    offset = 0
    for s, sf in enumerate(scenes):
        n = len(sf.object_ids)
        object_ids[s, :n] = sf.object_ids
        valid[s, :n] = True
        visual[s, :n] = sf.visual
        geom[s, :n] = sf.geom
        desc[s, :n] = sf.mask_desc
        cls[s, :n] = [class_pos[c] for c in sf.classes]
        for r, (i, j) in enumerate(sf.pair_keys):
            pair_row[s, i, j] = pair_row[s, j, i] = offset + r
        unions.append(sf.union_visual)
        bounds.append(sf.boundary_desc)
        offset += len(sf.pair_keys)
    union = np.concatenate(unions) if unions else np.zeros((0, VISUAL_DIM))
    bound = np.concatenate(bounds) if bounds else np.zeros((0, DESCRIPTOR_DIM))
    return FeatureBank([s.scene_id for s in scenes], object_ids, valid, visual, geom, desc, cls, pair_row, union, bound)
