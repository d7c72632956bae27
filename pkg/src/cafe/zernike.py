"""Zernike-moment shape descriptors.

Descriptors are the magnitudes |Z_{n,m}| for 0 <= n <= 30, 0 <= m <= n,
n - m even, ordered by (n, m): 256 numbers. A region is centred on its
foreground centroid and scaled so the farthest pixel centre sits just inside
the unit disk; each pixel contributes area 1 / r_max**2, so Z_00 carries the
fill ratio of the region within its enclosing disk.
"""

from __future__ import annotations

from functools import lru_cache
from math import lgamma, exp

import numpy as np

from .mask_ops import BinaryMask, MaskError, contact_bits, contour_bits

N_MAX = 30
DESCRIPTOR_DIM = 256
_EPS = 1e-9
_HIGH_ORDER = 20
_NOISE_FLOOR = 1e-12


@lru_cache(maxsize=1)
def _index_array() -> np.ndarray:
    rows = [(n, m) for n in range(N_MAX + 1) for m in range(n + 1) if (n - m) % 2 == 0]
    arr = np.array(rows, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def zernike_index_table() -> list[tuple[int, int]]:
    return [(int(n), int(m)) for n, m in _index_array()]


def _check_index(n: int, m: int) -> None:
    if not (0 <= m <= n) or (n - m) % 2:
        raise ValueError(f"invalid Zernike index (n={n}, m={m})")


def radial_polynomial_sum(n: int, m: int, rho):
    """Explicit factorial sum, coefficients via log-gamma."""
    _check_index(n, m)
    rho = np.asarray(rho, dtype=np.float64)
    total = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        log_c = lgamma(n - s + 1) - lgamma(s + 1) - lgamma((n + m) // 2 - s + 1) - lgamma((n - m) // 2 - s + 1)
        total = total + (-1) ** s * exp(log_c) * rho ** (n - 2 * s)
    return total


def _radial_table(rho: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """All R_{n,m}(rho) for the index table via Kintner's three-term recurrence in n."""
    out: dict[tuple[int, int], np.ndarray] = {}
    rho2 = rho * rho
    for m in range(N_MAX + 1):
        r_m = rho**m
        out[(m, m)] = r_m
        if m + 2 <= N_MAX:
            out[(m + 2, m)] = (m + 2) * rho ** (m + 2) - (m + 1) * r_m
        for n in range(m + 4, N_MAX + 1, 2):
            k1 = (n + m) * (n - m) * (n - 2) / 2.0
            k2 = 2.0 * n * (n - 1) * (n - 2)
            k3 = -(m * m) * (n - 1) - n * (n - 1) * (n - 2)
            k4 = -n * (n + m - 2) * (n - m - 2) / 2.0
            out[(n, m)] = ((k2 * rho2 + k3) * out[(n - 2, m)] + k4 * out[(n - 4, m)]) / k1
    return out


def radial_polynomial(n: int, m: int, rho):
    """R_{n,m}(rho) on [0, 1], evaluated by recurrence."""
    _check_index(n, m)
    rho_arr = np.asarray(rho, dtype=np.float64)
    if np.any(rho_arr < 0) or np.any(rho_arr > 1):
        raise ValueError("rho must lie in [0, 1]")
    r_m = rho_arr**m
    if n == m:
        return r_m
    prev2, prev = r_m, (m + 2) * rho_arr ** (m + 2) - (m + 1) * r_m
    rho2 = rho_arr * rho_arr
    for k in range(m + 4, n + 1, 2):
        k1 = (k + m) * (k - m) * (k - 2) / 2.0
        k2 = 2.0 * k * (k - 1) * (k - 2)
        k3 = -(m * m) * (k - 1) - k * (k - 1) * (k - 2)
        k4 = -k * (k + m - 2) * (k - m - 2) / 2.0
        prev2, prev = prev, ((k2 * rho2 + k3) * prev + k4 * prev2) / k1
    return prev


def polar_coordinates(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Unit-disk (rho, theta) of every foreground pixel centre plus the pixel area."""
    ys, xs = np.nonzero(bits)
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    r_max = float(np.sqrt(dx * dx + dy * dy).max())
    if r_max == 0.0:
        r_max = 1.0
    scale = (1.0 - _EPS) / r_max
    u, v = dx * scale, dy * scale
    rho = np.minimum(np.sqrt(u * u + v * v), 1.0)
    theta = np.arctan2(v, u)
    return rho, theta, 1.0 / (r_max * r_max)


def complex_moments(bits: np.ndarray) -> np.ndarray:
    """Complex Z_{n,m} for every index, in table order."""
    bits = np.asarray(bits, dtype=bool)
    if not bits.any():
        return np.zeros(DESCRIPTOR_DIM, dtype=np.complex128)
    rho, theta, pixel_area = polar_coordinates(bits)
    radial = _radial_table(rho)
    idx = _index_array()
    ms = np.arange(N_MAX + 1)
    # angular sums for each m: sum_p R(rho_p) e^{-i m theta_p}
    phase = np.exp(-1j * np.outer(ms, theta))  # (31, P)
    out = np.empty(DESCRIPTOR_DIM, dtype=np.complex128)
    for row, (n, m) in enumerate(idx):
        out[row] = (n + 1) / np.pi * pixel_area * np.dot(phase[m], radial[(int(n), int(m))])
    return out


def zernike_descriptor(region: BinaryMask) -> np.ndarray:
    """256 Zernike magnitudes of ``region``; all zeros for an empty region."""
    mags = np.abs(complex_moments(region.bits))
    high = _index_array()[:, 0] > _HIGH_ORDER
    mags[high & (mags < _NOISE_FLOOR)] = 0.0
    return mags


def mask_feature(mask: BinaryMask) -> np.ndarray:
    """Descriptor of an object's one-pixel contour."""
    if mask.is_empty():
        raise MaskError("mask_feature of an empty mask")
    return zernike_descriptor(BinaryMask(contour_bits(mask.bits)))


def boundary_feature(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Descriptor of the contour of the contact region of two masks (zero if none)."""
    if a.shape != b.shape:
        raise MaskError(f"dimension mismatch: {a.shape} vs {b.shape}")
    region = contact_bits(a.bits, b.bits)
    if not region.any():
        return np.zeros(DESCRIPTOR_DIM)
    return zernike_descriptor(BinaryMask(contour_bits(region)))
