"""
Differentiable k-space under-sampling patterns.

Learned patterns follow P = sigmoid(a * w), rescaled so the overall sampled
fraction (calibration block included) equals gamma. During training the mask is
either drawn as a binary Bernoulli sample whose backward pass is the identity
(straight-through) or relaxed with a second sigmoid of slope b. Masks are float64
arrays with entries in {0, 1}.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union
import logging
import math

import numpy as np
from scipy.optimize import bisect

from .autodiff import Node, Tape, record
from .kspace_io import write_png, write_tensor
from .numerics import uniform
from .types import KspaceLoupeError

logger = logging.getLogger(__name__)

BinaryMask = np.ndarray


class SamplingError(KspaceLoupeError):
    """Raised when a sampling budget cannot be met"""
    pass


@dataclass(frozen=True, eq=False)
class PatternParams:
    """Logits plus everything needed to turn them into the renormalized P'."""
    w: np.ndarray
    slope: float
    gamma: float
    calib: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "calib", np.asarray(self.calib, dtype=bool))
        if self.slope <= 0:
            raise SamplingError(f"Slope must be positive, got {self.slope}")
        if not 0.0 < self.gamma < 1.0:
            raise SamplingError(f"Under-sampling ratio must lie in (0, 1), got {self.gamma}")
        if self.calib.shape != self.w.shape:
            raise SamplingError(f"Calibration mask {self.calib.shape} vs logits {self.w.shape}")
        if self.calib.mean() >= self.gamma:
            raise SamplingError("Calibration region exceeds the sampling budget")

    def probability_node(self, w: Node) -> Node:
        """Renormalized P' of the logits node ``w`` (recorded on its tape)."""
        return renormalize(probability_map(w, self.slope), self.gamma, self.calib)

    def probabilities(self) -> np.ndarray:
        return pattern_from_logits(self.w, self.slope, self.gamma, self.calib)

    def topk(self) -> BinaryMask:
        return topk_pattern(self.probabilities(), self.gamma, self.calib)


def calibration_mask(height: int, width: int, size: int) -> np.ndarray:
    """Centered size x size block around (H//2, W//2)."""
    calib = np.zeros((height, width), dtype=bool)
    if size > 0:
        top, left = height // 2 - size // 2, width // 2 - size // 2
        calib[top:top + size, left:left + size] = True
    return calib


def init_pattern_logits(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(height, width))


def noncalib_target(gamma: float, calib: np.ndarray) -> float:
    """Mean the non-calibration entries need so that the overall mean is gamma."""
    total, n_calib = calib.size, int(calib.sum())
    target = (gamma * total - n_calib) / (total - n_calib)
    if target <= 0:
        raise SamplingError(f"Calibration region ({n_calib} samples) exceeds the budget "
                            f"gamma={gamma} of {total} locations")
    return target


def probability_map(w: Node, slope: float) -> Node:
    return record("sigmoid", record("scalar_mul", w, c=slope))


def renormalize(p: Node, gamma: float, calib: np.ndarray) -> Node:
    """Set calibration entries to 1 and rescale the rest to the mean the budget allows."""
    calib = np.asarray(calib, dtype=bool)
    return record("renormalize", p, noncalib=~calib, target=noncalib_target(gamma, calib))


def sample_binary(p: Node, rng: Optional[np.random.Generator] = None,
                  z: Optional[np.ndarray] = None) -> Node:
    """u = 1{z < P'} with z ~ U[0,1) drawn from ``rng`` unless given; identity backward."""
    if z is None:
        if rng is None:
            raise SamplingError("sample_binary needs either rng or z")
        z = uniform(rng, p.shape)
    return record("straight_through", p, np.asarray(z, dtype=np.float64))


def sample_approx(p: Node, z: np.ndarray, b_slope: float) -> Node:
    """Relaxed mask sigmoid(b * (P' - z)) used by AS-mode training."""
    return record("sigmoid", record("scalar_mul", record("sub", p, np.asarray(z, dtype=np.float64)),
                                    c=b_slope))


def relaxed_binary(p: Node, u_frozen: np.ndarray, p_frozen: np.ndarray) -> Node:
    """Smooth stand-in for a frozen binary draw: value u_frozen at p == p_frozen,
    Jacobian identity. Finite differences of programs built on it check the
    straight-through gradient."""
    return record("add", p, np.asarray(u_frozen, dtype=np.float64) - np.asarray(p_frozen))


def pattern_from_logits(w: np.ndarray, slope: float, gamma: float,
                        calib: np.ndarray) -> np.ndarray:
    tape = Tape(record=False)
    return renormalize(probability_map(tape.constant(w), slope), gamma, calib).value


def topk_pattern(p_prime: np.ndarray, gamma: float, calib: np.ndarray) -> BinaryMask:
    """Calibration block plus the largest P' values, floor(gamma*H*W) ones in total.
    Ties go to the lower row-major index."""
    calib = np.asarray(calib, dtype=bool)
    budget = math.floor(gamma * p_prime.size + 1e-9)
    n_calib = int(calib.sum())
    if budget < n_calib:
        raise SamplingError(f"Budget of {budget} samples is smaller than the "
                            f"calibration region ({n_calib})")
    flat_p = p_prime.reshape(-1)
    candidates = np.flatnonzero(~calib.reshape(-1))
    order = np.argsort(-flat_p[candidates], kind="stable")
    chosen = candidates[order[:budget - n_calib]]
    mask = calib.reshape(-1).astype(np.float64)
    mask[chosen] = 1.0
    return mask.reshape(p_prime.shape)


def vd_density(height: int, width: int, gamma: float, exponent: float,
               calib: np.ndarray) -> np.ndarray:
    """Polynomial variable-density PDF c * (1 - r/r_max)^d, clipped to [0, 1], with c
    found by bisection so the expected sampled fraction (calibration included) is gamma."""
    calib = np.asarray(calib, dtype=bool)
    if exponent < 0:
        raise SamplingError(f"VD exponent must be >= 0, got {exponent}")
    yy, xx = np.meshgrid(np.arange(height) - height // 2, np.arange(width) - width // 2,
                         indexing="ij")
    radius = np.hypot(yy, xx)
    base = (1.0 - radius / radius.max()) ** exponent
    base[calib] = 0.0
    needed = gamma * height * width - int(calib.sum())
    reachable = int(np.count_nonzero(base > 0))
    if needed < 0 or needed > reachable:
        raise SamplingError(f"VD target gamma={gamma} is infeasible "
                            f"(needs {needed:.1f} of {reachable} reachable samples)")

    def excess(c: float) -> float:
        return float(np.minimum(c * base, 1.0).sum() - needed)

    c_hi = 1.0 / base[base > 0].min()
    if excess(c_hi) == 0.0:
        scale = c_hi
    else:
        scale = bisect(excess, 0.0, c_hi, xtol=1e-15, maxiter=400)
    logger.debug("VD density scale %.6g (exponent %.2f)", scale, exponent)
    density = np.minimum(scale * base, 1.0)
    density[calib] = 1.0
    return density


def vd_pattern(height: int, width: int, gamma: float, exponent: float, calib: np.ndarray,
               rng: np.random.Generator) -> BinaryMask:
    calib = np.asarray(calib, dtype=bool)
    density = vd_density(height, width, gamma, exponent, calib)
    mask = (uniform(rng, (height, width)) < density).astype(np.float64)
    mask[calib] = 1.0
    return mask


def export_pattern(mask: BinaryMask, p_prime: Optional[np.ndarray], out_dir: Union[str, Path],
                   prefix: str = "pattern") -> Dict[str, Path]:
    out = Path(out_dir)
    paths = {"mask_png": out / f"{prefix}_mask.png", "mask_raw": out / f"{prefix}_mask.kst"}
    write_png(paths["mask_png"], mask)
    write_tensor(paths["mask_raw"], mask)
    if p_prime is not None:
        paths["prob_png"] = out / f"{prefix}_prob.png"
        paths["prob_raw"] = out / f"{prefix}_prob.kst"
        write_png(paths["prob_png"], p_prime)
        write_tensor(paths["prob_raw"], p_prime)
    logger.info("Exported pattern to %s (sampled fraction %.4f)", out, float(mask.mean()))
    return paths
