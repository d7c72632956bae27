"""Small random inputs shared by model, trainer and gradient tests."""

from __future__ import annotations

import numpy as np

from cafe.features import DESCRIPTOR_DIM, GEOM_DIM, VISUAL_DIM, FeatureBank, class_embedding_table
from cafe.model import gather_batch

CLASSES = ["a", "b", "c"]


def random_bank(rng: np.random.Generator, scenes: int = 2, n_objects: int = 4, zero_boundary_every: int = 3) -> FeatureBank:
    """Dense random bank; every object pair has a row, some boundary rows are zero."""
    S, n = scenes, n_objects
    pair_row = np.full((S, n, n), -1, dtype=np.int64)
    r = 0
    for s in range(S):
        for i in range(n):
            for j in range(i + 1, n):
                pair_row[s, i, j] = pair_row[s, j, i] = r
                r += 1
    boundary = rng.random((r, DESCRIPTOR_DIM)) * 0.3
    boundary[::zero_boundary_every] = 0.0
    return FeatureBank(
        [f"s{s}" for s in range(S)],
        np.tile(np.arange(1, n + 1), (S, 1)),
        np.ones((S, n), dtype=bool),
        rng.random((S, n, VISUAL_DIM)),
        rng.random((S, n, GEOM_DIM)),
        rng.random((S, n, DESCRIPTOR_DIM)) * 0.3,
        rng.integers(0, len(CLASSES), (S, n)),
        pair_row,
        rng.random((r, VISUAL_DIM)),
        boundary,
    )


def random_batch(rng: np.random.Generator, size: int = 6, **bank_kwargs):
    bank = random_bank(rng, **bank_kwargs)
    S, n = bank.valid.shape
    scene = rng.integers(0, S, size)
    subj = rng.integers(0, n, size)
    obj = (subj + rng.integers(1, n, size)) % n
    return gather_batch(bank, class_embedding_table(CLASSES, 0), scene, subj, obj)
