"""
Complex tensor helpers, the centered orthonormal 2-D FFT and seeded random streams.

Complex tensors are numpy ``complex128`` arrays, whose memory layout is exactly
interleaved (real, imag) f64 pairs in row-major order. The FFT convention is
``fftshift(fft2(ifftshift(x))) / sqrt(H*W)`` over the last two axes, so the DC
term sits at ``(H//2, W//2)`` and the transform is unitary.

Random streams use numpy's PCG64 bit generator (a permuted linear congruential
generator). Streams are fully determined by the seed and are bit-identical across
platforms; sub-streams are derived with ``SeedSequence`` spawn keys.
"""

from typing import Sequence, Tuple, Union
import logging

import numpy as np

from .types import KspaceLoupeError

logger = logging.getLogger(__name__)

_AXES = (-2, -1)


class NumericsError(KspaceLoupeError):
    """Raised for non-finite tensors or malformed shapes"""
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"Non-finite values in {what}")
    return x


def _check_image(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise NumericsError(f"{name} expects a tensor with trailing (H, W) axes, got shape {x.shape}")
    return check_finite(x, f"{name} input")


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered, orthonormal 2-D FFT over the last two axes."""
    img = _check_image(img, "fft2c")
    shifted = np.fft.ifftshift(img, axes=_AXES)
    return np.fft.fftshift(np.fft.fft2(shifted, axes=_AXES, norm="ortho"), axes=_AXES)


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Exact inverse and adjoint of :func:`fft2c`."""
    ksp = _check_image(ksp, "ifft2c")
    shifted = np.fft.ifftshift(ksp, axes=_AXES)
    return np.fft.fftshift(np.fft.ifft2(shifted, axes=_AXES, norm="ortho"), axes=_AXES)


def to_pair(x: np.ndarray) -> np.ndarray:
    """complex (..., H, W) -> real (..., 2, H, W)"""
    x = np.asarray(x, dtype=np.complex128)
    return np.stack([x.real, x.imag], axis=-3)


def from_pair(p: np.ndarray) -> np.ndarray:
    """real (..., 2, H, W) -> complex (..., H, W)"""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 3 or p.shape[-3] != 2:
        raise NumericsError(f"Expected a (..., 2, H, W) real pair, got shape {p.shape}")
    return p[..., 0, :, :] + 1j * p[..., 1, :, :]


def fft2c_pair(p: np.ndarray) -> np.ndarray:
    return to_pair(fft2c(from_pair(p)))


def ifft2c_pair(p: np.ndarray) -> np.ndarray:
    return to_pair(ifft2c(from_pair(p)))


def cdot(x: np.ndarray, y: np.ndarray) -> complex:
    """<x, y> = sum(conj(x) * y)"""
    return complex(np.vdot(x, y))


# Random streams

def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent sub-stream of ``seed`` addressed by integer keys (e.g. sample index)."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def uniform(rng: np.random.Generator, shape: Union[int, Sequence[int]]) -> np.ndarray:
    """iid samples in [0, 1) as float64."""
    shape_t: Tuple[int, ...] = (shape,) if isinstance(shape, int) else tuple(shape)
    if len(shape_t) == 0:
        raise NumericsError("uniform() requires a nonempty shape")
    return rng.random(shape_t, dtype=np.float64)


def crandn(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Circular complex Gaussian samples with unit variance per component."""
    return rng.standard_normal(tuple(shape)) + 1j * rng.standard_normal(tuple(shape))
