"""Binary-mask geometry and the scene container.

Masks are boolean ``(height, width)`` grids. Morphology uses the full 3x3
structuring element (8-connectivity) and treats pixels outside the image as
background, so contours come out one pixel thick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, height: int, width: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BinaryMask({self.height}x{self.width}, area={self.area})"


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def union(self, other: BoundingBox) -> BoundingBox:
        return BoundingBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )


def _shifted_stack(bits: np.ndarray) -> np.ndarray:
    """All nine 3x3-neighbourhood shifts of ``bits`` with a background border."""
    h, w = bits.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    return np.stack([padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)])


def erode_bits(bits: np.ndarray) -> np.ndarray:
    return _shifted_stack(bits).all(axis=0)


def dilate_bits(bits: np.ndarray) -> np.ndarray:
    return _shifted_stack(bits).any(axis=0)


def erode(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(erode_bits(mask.bits))


def dilate(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(dilate_bits(mask.bits))


def contour_bits(bits: np.ndarray) -> np.ndarray:
    return bits & ~erode_bits(bits)


def contour(mask: BinaryMask) -> BinaryMask:
    """Foreground pixels that do not survive erosion."""
    return BinaryMask(contour_bits(mask.bits))


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise MaskError(f"dimension mismatch: {a.shape} vs {b.shape}")


def intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape(a, b)
    return BinaryMask(a.bits & b.bits)


def contact_bits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return dilate_bits(a) & dilate_bits(b)


def contact(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Interaction region of two disjoint masks: overlap of their 1-pixel dilations.

    Non-empty iff the masks come within Chebyshev distance 2 of each other,
    i.e. at most one background pixel separates them.
    """
    _check_same_shape(a, b)
    return BinaryMask(contact_bits(a.bits, b.bits))


def tight_bbox(mask: BinaryMask) -> BoundingBox:
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise MaskError("tight_bbox of an empty mask")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


# --- scenes -----------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    id: int
    label: str
    mask: BinaryMask
    shape_kind: str | None = None  # generator metadata, not used by features


@dataclass(frozen=True)
class Triplet:
    subject: int
    object: int
    predicate: str


@dataclass
class Scene:
    height: int
    width: int
    objects: list[SceneObject] = field(default_factory=list)
    triplets: list[Triplet] = field(default_factory=list)
    scene_id: str = ""

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.height, self.width)

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass(frozen=True)
class Violation:
    kind: str  # overlap | empty_mask | size_mismatch | dangling_reference | self_relation | duplicate_id
    ids: tuple
    detail: str = ""


def validate_scene(scene: Scene) -> list[Violation]:
    """Collect every constraint violation; an empty list means the scene is valid."""
    out: list[Violation] = []
    seen: set[int] = set()
    for obj in scene.objects:
        if obj.id in seen:
            out.append(Violation("duplicate_id", (obj.id,)))
        seen.add(obj.id)
        if obj.mask.shape != scene.image_size:
            out.append(Violation("size_mismatch", (obj.id,), f"{obj.mask.shape} != {scene.image_size}"))
        elif obj.mask.is_empty():
            out.append(Violation("empty_mask", (obj.id,)))

    sized = [o for o in scene.objects if o.mask.shape == scene.image_size]
    if sized:
        coverage = np.sum([o.mask.bits for o in sized], axis=0, dtype=np.int32)
        if coverage.max() > 1:
            for i, a in enumerate(sized):
                for b in sized[i + 1 :]:
                    shared = a.mask.bits & b.mask.bits
                    if shared.any():
                        y, x = np.argwhere(shared)[0]
                        out.append(
                            Violation(
                                "overlap",
                                (a.id, b.id),
                                f"{int(shared.sum())} shared pixels, first at (x={x}, y={y})",
                            )
                        )

    for t in scene.triplets:
        missing = tuple(i for i in (t.subject, t.object) if i not in seen)
        if missing:
            out.append(Violation("dangling_reference", missing, f"triplet {t}"))
        elif t.subject == t.object:
            out.append(Violation("self_relation", (t.subject,), f"triplet {t}"))
    return out


# --- serialization ------------------------------------------------------------


def rle_encode(mask: BinaryMask) -> list[int]:
    """Alternating background/foreground run lengths, row-major, background first."""
    flat = mask.bits.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: list[int], height: int, width: int) -> BinaryMask:
    if any(r < 0 for r in runs):
        raise MaskError("negative run length")
    if sum(runs) != height * width:
        raise MaskError(f"runs sum to {sum(runs)}, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    return BinaryMask(flat.reshape(height, width))


def scene_to_dict(scene: Scene) -> dict:
    objects = []
    for o in scene.objects:
        entry = {"id": o.id, "class": o.label, "rle": rle_encode(o.mask)}
        if o.shape_kind is not None:
            entry["shape"] = o.shape_kind
        objects.append(entry)
    return {
        "height": scene.height,
        "width": scene.width,
        "objects": objects,
        "triplets": [[t.subject, t.object, t.predicate] for t in scene.triplets],
    }


def scene_from_dict(data: dict, scene_id: str = "") -> Scene:
    h, w = int(data["height"]), int(data["width"])
    objects = [
        SceneObject(int(o["id"]), str(o["class"]), rle_decode(o["rle"], h, w), o.get("shape"))
        for o in data["objects"]
    ]
    triplets = [Triplet(int(s), int(o), str(p)) for s, o, p in data["triplets"]]
    return Scene(h, w, objects, triplets, scene_id)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), separators=(",", ":")) + "\n")


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    return scene_from_dict(json.loads(path.read_text()), scene_id=path.stem)
