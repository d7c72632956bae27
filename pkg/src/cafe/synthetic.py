"""Seeded generator of imbalanced synthetic scenes with tiered predicates.

Each scene holds 3-8 disjoint shapes on a 64x64 grid. Annotated triplets
come only from constructed subject/object pairs; every constructed pair is
checked against :func:`label_pair`, the rule that defines the ground truth:

* boundary tier (masks in contact): enclosing, resting on, supporting, touching
* mask tier (no contact, subject shape matters): circling near, cornering,
  floating above, rolling beside
* bbox tier (everything else): left of, right of, above, below
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mask_ops import BinaryMask, Scene, SceneObject, Triplet, contact_bits, dilate_bits, save_scene, validate_scene

SHAPES = ("rect", "bar", "disk", "ring", "L")
CLASS_NAMES = ("person", "table", "ball", "tree", "box", "lamp")
TIERS = ("bbox", "mask", "boundary")

# Zipf rank order: list position is frequency rank.
DEFAULT_PREDICATES = (
    ("left of", "bbox"),
    ("above", "bbox"),
    ("right of", "bbox"),
    ("below", "bbox"),
    ("rolling beside", "mask"),
    ("floating above", "mask"),
    ("cornering", "mask"),
    ("circling near", "mask"),
    ("touching", "boundary"),
    ("resting on", "boundary"),
    ("supporting", "boundary"),
    ("enclosing", "boundary"),
)
_KNOWN = dict(DEFAULT_PREDICATES)


class InfeasibleConfig(RuntimeError):
    pass


@dataclass(frozen=True)
class PredicateSpec:
    name: str
    tier: str
    weight: float


def zipf_predicates(exponent: float) -> tuple[PredicateSpec, ...]:
    return tuple(PredicateSpec(n, t, float((r + 1) ** -exponent)) for r, (n, t) in enumerate(DEFAULT_PREDICATES))


@dataclass(frozen=True)
class GeneratorConfig:
    num_scenes: int = 2000
    image_size: tuple[int, int] = (64, 64)
    zipf_exponent: float = 1.2
    seed: int = 7
    predicate_spec: tuple[PredicateSpec, ...] | None = None
    test_fraction: float = 0.2
    heldout_fraction: float = 0.08
    pairs_per_scene: tuple[int, int] = (1, 3)
    objects_per_scene: tuple[int, int] = (3, 8)
    max_retries: int = 200

    def predicates(self) -> tuple[PredicateSpec, ...]:
        return self.predicate_spec if self.predicate_spec is not None else zipf_predicates(self.zipf_exponent)

    def validate(self) -> None:
        preds = self.predicates()
        for p in preds:
            if p.name not in _KNOWN or _KNOWN[p.name] != p.tier:
                raise ValueError(f"no placement rule for predicate {p.name!r} in tier {p.tier!r}")
            if not p.weight > 0:
                raise ValueError(f"weight of {p.name!r} must be positive")
        missing = set(TIERS) - {p.tier for p in preds}
        if missing:
            raise ValueError(f"every tier needs a predicate; missing {sorted(missing)}")
        lo, hi = self.objects_per_scene
        if not 2 <= lo <= hi:
            raise ValueError("objects_per_scene must satisfy 2 <= lo <= hi")
        if 2 * self.pairs_per_scene[0] > hi:
            raise ValueError("too many pairs for the object budget")
        if min(self.image_size) < 32:
            raise ValueError("image must be at least 32x32")


# --- shapes ---------------------------------------------------------------------


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius + radius * 0.5


def _ring(outer: int, thickness: int) -> np.ndarray:
    y, x = np.mgrid[-outer : outer + 1, -outer : outer + 1]
    d2 = x * x + y * y
    inner = outer - thickness
    return (d2 <= outer * outer + outer * 0.5) & (d2 > inner * inner + inner * 0.5)


def _l_shape(h: int, w: int, arm: int, flip: int) -> np.ndarray:
    s = np.zeros((h, w), dtype=bool)
    s[:, :arm] = True
    s[h - arm :, :] = True
    return np.rot90(s, flip).copy()


def make_shape(kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "rect":
        return np.ones((int(rng.integers(5, 12)), int(rng.integers(5, 12))), dtype=bool)
    if kind == "bar":
        long, short = int(rng.integers(12, 19)), int(rng.integers(3, 5))
        return np.ones((long, short) if rng.random() < 0.5 else (short, long), dtype=bool)
    if kind == "disk":
        return _disk(int(rng.integers(3, 6)))
    if kind == "ring":
        return _ring(int(rng.integers(5, 8)), 2)
    if kind == "L":
        return _l_shape(int(rng.integers(8, 13)), int(rng.integers(8, 13)), 3, int(rng.integers(4)))
    raise ValueError(f"unknown shape {kind!r}")


def _paste(stamp: np.ndarray, y: int, x: int, size: tuple[int, int]) -> np.ndarray | None:
    H, W = size
    h, w = stamp.shape
    if y < 0 or x < 0 or y + h > H or x + w > W:
        return None
    canvas = np.zeros(size, dtype=bool)
    canvas[y : y + h, x : x + w] = stamp
    return canvas


# --- labelling ------------------------------------------------------------------


def _box(bits: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(bits)
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def _center(bits: np.ndarray) -> tuple[float, float]:
    y0, x0, y1, x1 = _box(bits)
    return (y0 + y1) / 2.0, (x0 + x1) / 2.0


def _inside(inner: np.ndarray, outer: np.ndarray) -> bool:
    iy0, ix0, iy1, ix1 = _box(inner)
    oy0, ox0, oy1, ox1 = _box(outer)
    return oy0 < iy0 and ox0 < ix0 and iy1 < oy1 and ix1 < ox1


def label_pair(subj: np.ndarray, subj_shape: str, obj: np.ndarray) -> str:
    """Ground-truth predicate of an ordered pair of disjoint masks."""
    sy, sx = _center(subj)
    oy, ox = _center(obj)
    dy, dx = oy - sy, ox - sx
    horizontal = abs(dx) >= abs(dy)
    if contact_bits(subj, obj).any():
        if subj_shape == "ring" and _inside(obj, subj):
            return "enclosing"
        if horizontal:
            return "touching"
        return "resting on" if dy > 0 else "supporting"
    if subj_shape == "ring":
        return "circling near"
    if subj_shape == "L":
        return "cornering"
    if subj_shape == "disk":
        if horizontal:
            return "rolling beside"
        if dy > 0:
            return "floating above"
    if horizontal:
        return "left of" if dx > 0 else "right of"
    return "above" if dy > 0 else "below"


# --- pair construction ----------------------------------------------------------

_SUBJECT_SHAPES = {
    "left of": ("rect", "bar"),
    "right of": ("rect", "bar"),
    "above": ("rect", "bar"),
    "below": ("rect", "bar", "disk"),
    "rolling beside": ("disk",),
    "floating above": ("disk",),
    "cornering": ("L",),
    "circling near": ("ring",),
    "touching": ("rect", "bar", "disk", "L"),
    "resting on": ("rect", "bar", "disk", "L"),
    "supporting": ("rect", "bar", "disk", "L"),
    "enclosing": ("ring",),
}
_OBJECT_SHAPES = ("rect", "bar", "disk", "L")

# Direction the subject sits in, relative to the object: (dy, dx) unit step.
_DIRECTIONS = {
    "left of": [(0, -1)],
    "right of": [(0, 1)],
    "above": [(-1, 0)],
    "below": [(1, 0)],
    "rolling beside": [(0, -1), (0, 1)],
    "floating above": [(-1, 0)],
    "cornering": [(0, -1), (0, 1), (-1, 0), (1, 0)],
    "circling near": [(0, -1), (0, 1), (-1, 0), (1, 0)],
    "touching": [(0, -1), (0, 1)],
    "resting on": [(-1, 0)],
    "supporting": [(1, 0)],
}
_CONTACT = {"touching", "resting on", "supporting"}


def _slide(obj_canvas, obj_pos, obj_stamp, stamp, direction, contact_wanted, rng, size):
    """Move ``stamp`` toward the object along ``direction`` until contact fires.

    Returns the subject canvas at the first contact position, or a few steps
    before it for non-contact placements.
    """
    oy, ox = obj_pos
    oh, ow = obj_stamp.shape
    h, w = stamp.shape
    dy, dx = direction
    if dx:
        y = oy + (oh - h) // 2 + int(rng.integers(-(min(oh, h) // 3), min(oh, h) // 3 + 1))
        x = ox - w - 20 if dx < 0 else ox + ow + 20
        step = (0, -dx)
    else:
        x = ox + (ow - w) // 2 + int(rng.integers(-(min(ow, w) // 3), min(ow, w) // 3 + 1))
        y = oy - h - 20 if dy < 0 else oy + oh + 20
        step = (-dy, 0)
    halo = dilate_bits(obj_canvas)
    path = []
    for _ in range(40):
        path.append((y, x))
        sy0, sx0 = max(y, 0), max(x, 0)
        sy1, sx1 = min(y + h, size[0]), min(x + w, size[1])
        if sy0 < sy1 and sx0 < sx1:
            ys, xs = sy0 - y, sx0 - x
            part = stamp[ys : ys + sy1 - sy0, xs : xs + sx1 - sx0]
            if (dilate_bits(_window(part, sy0, sx0, size)) & halo).any():
                break
        y, x = y + step[0], x + step[1]
    else:
        return None
    if contact_wanted:
        y, x = path[-1]
    else:
        back = int(rng.integers(1, 9))
        if back >= len(path):
            return None
        y, x = path[-1 - back]
    return _paste(stamp, y, x, size)


def _window(part, y, x, size):
    canvas = np.zeros(size, dtype=bool)
    canvas[y : y + part.shape[0], x : x + part.shape[1]] = part
    return canvas


def _ring_around(contact_wanted: bool, rng: np.random.Generator, size: tuple[int, int]):
    """Ring subject with an object in its hole, touching it or not.

    Ring thickness varies, so hole and inner-object sizes overlap between the
    two cases and only the contact region tells them apart.
    """
    H, W = size
    outer = int(rng.integers(7, 11))
    hole = outer - int(rng.integers(2, 5))
    gap = int(rng.integers(1, 3)) if contact_wanted else int(rng.integers(3, 5))
    radius = hole - gap
    if radius < 1:
        return None
    ring = _ring(outer, outer - hole)
    obj_shape = str(rng.choice(("disk", "rect")))
    if obj_shape == "disk":
        inner = _disk(radius)
    else:
        side = max(1, int(round(2 * radius / np.sqrt(2))) + 1)
        inner = np.ones((side, side), dtype=bool)
    y = int(rng.integers(0, H - ring.shape[0] + 1))
    x = int(rng.integers(0, W - ring.shape[1] + 1))
    subj = _paste(ring, y, x, size)
    off_y = (ring.shape[0] - inner.shape[0]) // 2
    off_x = (ring.shape[1] - inner.shape[1]) // 2
    obj = _paste(inner, y + off_y, x + off_x, size)
    return subj, "ring", obj, obj_shape


def construct_pair(predicate: str, rng: np.random.Generator, size: tuple[int, int]):
    """Random (subject canvas, subject shape, object canvas, object shape) labelled ``predicate``, or None."""
    H, W = size
    if predicate == "enclosing" or (predicate == "circling near" and rng.random() < 0.5):
        return _ring_around(predicate == "enclosing", rng, size)
    subj_shape = str(rng.choice(_SUBJECT_SHAPES[predicate]))
    obj_shape = str(rng.choice(_OBJECT_SHAPES))
    obj_stamp = make_shape(obj_shape, rng)
    stamp = make_shape(subj_shape, rng)
    oh, ow = obj_stamp.shape
    oy = int(rng.integers(0, H - oh + 1))
    ox = int(rng.integers(0, W - ow + 1))
    obj = _paste(obj_stamp, oy, ox, size)
    dirs = _DIRECTIONS[predicate]
    direction = dirs[int(rng.integers(len(dirs)))]
    subj = _slide(obj, (oy, ox), obj_stamp, stamp, direction, predicate in _CONTACT, rng, size)
    if subj is None:
        return None
    return subj, subj_shape, obj, obj_shape


# --- scenes ---------------------------------------------------------------------


def _grow(bits: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        bits = dilate_bits(bits)
    return bits


@dataclass
class Dataset:
    scenes: list[Scene]
    train_ids: list[str]
    test_ids: list[str]
    heldout_triples: list[tuple[str, str, str]]
    config: GeneratorConfig
    predicates: tuple[PredicateSpec, ...] = field(default=())

    def split(self, name: str) -> list[Scene]:
        wanted = set(self.train_ids if name == "train" else self.test_ids)
        return [s for s in self.scenes if s.scene_id in wanted]

    def tier_of(self) -> dict[str, str]:
        return {p.name: p.tier for p in self.predicates}


def _heldout_triples(rng, predicates, fraction):
    triples = [(s, p.name, o) for s in CLASS_NAMES for p in predicates for o in CLASS_NAMES]
    n = int(round(fraction * len(triples)))
    pick = rng.choice(len(triples), size=n, replace=False)
    return sorted(triples[i] for i in pick)


def _one_scene(rng, cfg, preds, weights, heldout, is_train, scene_id):
    size = tuple(cfg.image_size)
    lo_obj, hi_obj = cfg.objects_per_scene
    n_pairs = int(rng.integers(cfg.pairs_per_scene[0], cfg.pairs_per_scene[1] + 1))
    n_pairs = min(n_pairs, hi_obj // 2)
    n_objects = int(rng.integers(max(lo_obj, 2 * n_pairs), hi_obj + 1))
    occupied = np.zeros(size, dtype=bool)
    masks: list[tuple[np.ndarray, str]] = []
    pairs: list[tuple[int, int, str]] = []
    for _ in range(n_pairs):
        predicate = preds[int(rng.choice(len(preds), p=weights))].name
        for _attempt in range(cfg.max_retries):
            built = construct_pair(predicate, rng, size)
            if built is None:
                continue
            subj, subj_shape, obj, obj_shape = built
            if (subj & obj).any() or label_pair(subj, subj_shape, obj) != predicate:
                continue
            if ((subj | obj) & _grow(occupied, 3)).any():
                continue
            masks += [(subj, subj_shape), (obj, obj_shape)]
            pairs.append((len(masks) - 2, len(masks) - 1, predicate))
            occupied |= subj | obj
            break
        else:
            return None
    H, W = size
    while len(masks) < n_objects:
        for _attempt in range(cfg.max_retries):
            shape = str(rng.choice(SHAPES))
            stamp = make_shape(shape, rng)
            bits = _paste(stamp, int(rng.integers(0, H - stamp.shape[0] + 1)), int(rng.integers(0, W - stamp.shape[1] + 1)), size)
            if not (bits & _grow(occupied, 3)).any():
                masks.append((bits, shape))
                occupied |= bits
                break
        else:
            break  # crowded scene: keep what fits
    if len(masks) < lo_obj:
        return None
    classes = [str(rng.choice(CLASS_NAMES)) for _ in masks]
    for s, o, p in pairs:
        for _ in range(cfg.max_retries):
            if not (is_train and (classes[s], p, classes[o]) in heldout):
                break
            classes[s] = str(rng.choice(CLASS_NAMES))
            classes[o] = str(rng.choice(CLASS_NAMES))
        else:
            return None
    objects = [SceneObject(i + 1, classes[i], BinaryMask(bits), shape) for i, (bits, shape) in enumerate(masks)]
    triplets = [Triplet(s + 1, o + 1, p) for s, o, p in pairs]
    return Scene(H, W, objects, triplets, scene_id)


def generate(cfg: GeneratorConfig) -> Dataset:
    cfg.validate()
    preds = cfg.predicates()
    weights = np.array([p.weight for p in preds])
    weights = weights / weights.sum()
    rng = np.random.default_rng(cfg.seed)
    heldout = set(_heldout_triples(rng, preds, cfg.heldout_fraction))
    n_test = int(round(cfg.test_fraction * cfg.num_scenes))
    order = rng.permutation(cfg.num_scenes)
    test_index = set(int(i) for i in order[:n_test])
    scenes = []
    for i in range(cfg.num_scenes):
        scene_id = f"scene_{i:05d}"
        for _attempt in range(cfg.max_retries):
            scene = _one_scene(rng, cfg, preds, weights, heldout, i not in test_index, scene_id)
            if scene is not None:
                break
        else:
            raise InfeasibleConfig(f"could not place objects for {scene_id}")
        problems = validate_scene(scene)
        if problems:
            raise InfeasibleConfig(f"{scene_id}: {problems[0]}")
        scenes.append(scene)
    ids = [s.scene_id for s in scenes]
    train = [sid for i, sid in enumerate(ids) if i not in test_index]
    test = [sid for i, sid in enumerate(ids) if i in test_index]
    return Dataset(scenes, train, test, sorted(heldout), cfg, preds)


def predicate_counts(scenes: list[Scene]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in scenes:
        for t in s.triplets:
            counts[t.predicate] = counts.get(t.predicate, 0) + 1
    return counts


# --- persistence ----------------------------------------------------------------


def manifest(ds: Dataset) -> dict:
    cfg = asdict(ds.config)
    cfg["predicate_spec"] = [asdict(p) for p in ds.predicates]
    cfg["image_size"] = list(ds.config.image_size)
    return {
        "seed": ds.config.seed,
        "config": cfg,
        "classes": list(CLASS_NAMES),
        "predicates": [asdict(p) for p in ds.predicates],
        "train": ds.train_ids,
        "test": ds.test_ids,
        "heldout_triples": [list(t) for t in ds.heldout_triples],
    }


def write_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    for scene in ds.scenes:
        save_scene(scene, out / "scenes" / f"{scene.scene_id}.json")
    (out / "manifest.json").write_text(json.dumps(manifest(ds), indent=2, sort_keys=True) + "\n")
    return out
