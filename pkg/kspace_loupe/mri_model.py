"""
Multi-coil MRI forward model and synthetic data.

The acquisition operator is A: x -> {U F S_j x}. The mask is applied once per
application of A or A^H; the normal operator used by data consistency is
sum_j conj(S_j) F^H (U * F (S_j x)), which for a binary U equals A^H A exactly.
"""

from typing import Union
import logging

import numpy as np

from .autodiff import Node, record
from .numerics import crandn, fft2c, ifft2c, to_pair
from .types import CoilSensitivities, KSpaceSample, KspaceLoupeError

logger = logging.getLogger(__name__)

MIN_PHANTOM_SIZE = 16

SensLike = Union[CoilSensitivities, np.ndarray]


class MriModelError(KspaceLoupeError):
    """Raised when operator inputs disagree in shape"""
    pass


def _maps(sens: SensLike) -> np.ndarray:
    return sens.maps if isinstance(sens, CoilSensitivities) else np.asarray(sens)


def _check_mask(mask: np.ndarray, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != tuple(shape):
        raise MriModelError(f"Mask shape {mask.shape} does not match image shape {tuple(shape)}")
    return mask


def sense_forward(x: np.ndarray, sens: SensLike, mask: np.ndarray) -> np.ndarray:
    """Per coil j: mask * fft2c(S_j * x), shape (N_c, H, W)."""
    maps = _maps(sens)
    if x.shape != maps.shape[1:]:
        raise MriModelError(f"sense_forward: image {x.shape} vs sensitivities {maps.shape}")
    mask = _check_mask(mask, x.shape)
    return mask * fft2c(maps * x)


def sense_adjoint(y: np.ndarray, sens: SensLike, mask: np.ndarray) -> np.ndarray:
    """sum_j conj(S_j) * ifft2c(mask * y_j), shape (H, W)."""
    maps = _maps(sens)
    if y.shape != maps.shape:
        raise MriModelError(f"sense_adjoint: data {y.shape} vs sensitivities {maps.shape}")
    mask = _check_mask(mask, y.shape[1:])
    return np.sum(np.conj(maps) * ifft2c(mask * y), axis=0)


def sense_normal(x: np.ndarray, sens: SensLike, mask: np.ndarray) -> np.ndarray:
    """sum_j conj(S_j) ifft2c(mask * fft2c(S_j x)) -- the mask enters once."""
    maps = _maps(sens)
    if x.shape != maps.shape[1:]:
        raise MriModelError(f"sense_normal: image {x.shape} vs sensitivities {maps.shape}")
    mask = _check_mask(mask, x.shape)
    return np.sum(np.conj(maps) * ifft2c(mask * fft2c(maps * x)), axis=0)


# Tape versions, composed from the recorded op set

def sense_forward_node(x: Node, sens_pair: Node, mask: Node) -> Node:
    coils = record("cmul", sens_pair, record("broadcast_coils", x, n=sens_pair.shape[0]))
    return record("mask_mul", mask, record("fft2c", coils))


def sense_adjoint_node(y: Node, sens_pair: Node, mask: Node) -> Node:
    images = record("ifft2c", record("mask_mul", mask, y))
    return record("sum_coils", record("cmul_conj", sens_pair, images))


def sense_normal_node(x: Node, sens_pair: Node, mask: Node) -> Node:
    coils = record("cmul", sens_pair, record("broadcast_coils", x, n=sens_pair.shape[0]))
    masked = record("mask_mul", mask, record("fft2c", coils))
    return record("sum_coils", record("cmul_conj", sens_pair, record("ifft2c", masked)))


# Synthetic data

def _grid(height: int, width: int):
    return np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij")


def _ellipse(y, x, cy, cx, ay, ax, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return ((u / ax) ** 2 + (v / ay) ** 2) <= 1.0


def random_phase(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth quadratic phase; coefficients of 1, x, y, x^2, xy, y^2 in [-pi/4, pi/4]."""
    y, x = _grid(height, width)
    coeffs = rng.uniform(-np.pi / 4, np.pi / 4, size=6)
    monomials = (np.ones_like(x), x, y, x ** 2, x * y, y ** 2)
    return sum(c * m for c, m in zip(coeffs, monomials))


def simulate_phantom(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Random ellipse phantom (5-12 ellipses) with a smooth phase; max magnitude 1."""
    if height < MIN_PHANTOM_SIZE or width < MIN_PHANTOM_SIZE:
        raise MriModelError(f"Phantom needs at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, "
                            f"got {height}x{width}")
    y, x = _grid(height, width)
    n_ellipses = int(rng.integers(5, 13))
    # the first ellipse is a large body outline so the support is never empty
    magnitude = rng.uniform(0.2, 1.0) * _ellipse(
        y, x, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
        rng.uniform(0.7, 0.9), rng.uniform(0.55, 0.75), rng.uniform(0, np.pi))
    for _ in range(n_ellipses - 1):
        magnitude = magnitude + rng.uniform(0.2, 1.0) * _ellipse(
            y, x, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
            rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35), rng.uniform(0, np.pi))
    magnitude = magnitude / magnitude.max()
    phase = random_phase(rng, height, width)
    return magnitude * np.exp(1j * phase)


def simulate_coils(rng: np.random.Generator, height: int, width: int,
                   n_coils: int) -> CoilSensitivities:
    """Gaussian coil profiles on a ring around the FOV with random phase ramps,
    normalized so that sum_j |S_j|^2 = 1 at every pixel."""
    if n_coils < 1:
        raise MriModelError("n_coils must be >= 1")
    y, x = _grid(height, width)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for j in range(n_coils):
        angle = offset + 2 * np.pi * j / n_coils
        cy, cx = 1.2 * np.sin(angle), 1.2 * np.cos(angle)
        width_j = rng.uniform(0.6, 1.0)
        ky, kx = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
        phase0 = rng.uniform(-np.pi, np.pi)
        bump = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * width_j ** 2))
        maps[j] = bump * np.exp(1j * (ky * y + kx * x + phase0))
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps)


def combine_coils(kspace: np.ndarray, sens: SensLike) -> np.ndarray:
    """Adjoint coil combination of fully sampled k-space (the ground-truth label)."""
    return sense_adjoint(kspace, sens, np.ones(kspace.shape[1:]))


def simulate_sample(rng: np.random.Generator, height: int, width: int, n_coils: int,
                    noise_std: float = 0.0) -> KSpaceSample:
    image = simulate_phantom(rng, height, width)
    sens = simulate_coils(rng, height, width, n_coils)
    kspace = fft2c(sens.maps * image)
    if noise_std > 0:
        kspace = kspace + noise_std * crandn(rng, kspace.shape)
    return KSpaceSample(kspace=kspace, sens=sens, label=combine_coils(kspace, sens))


def sens_pair(sens: SensLike) -> np.ndarray:
    """Sensitivities as a real (N_c, 2, H, W) pair for the tape."""
    return to_pair(_maps(sens))
