"""
Non-learned baselines: zero-filled adjoint and isotropic-TV reconstruction.

The TV problem

    min_x  sum_j ||m * F(S_j x) - m * b_j||^2 + alpha * TV_iso(x)

is solved with the Chambolle-Pock primal-dual iteration on the stacked operator
K = [A; grad], with tau = sigma = 0.99 / ||K|| from the power method.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np

from ..config import TVConfig
from ..mri_model import SensLike, sense_adjoint, sense_forward
from ..numerics import crandn, make_rng
from . import ReconstructionError

logger = logging.getLogger(__name__)

STEP_FACTOR = 0.99
DIVERGENCE_PATIENCE = 10

LinearOp = Callable[[np.ndarray], np.ndarray]


class TVDivergenceError(ReconstructionError):
    """Raised when the TV objective keeps growing or becomes non-finite"""
    pass


@dataclass
class TVResult:
    image: np.ndarray
    objective: List[float] = field(default_factory=list)       # index 0 is the zero-filled start
    best_objective: List[float] = field(default_factory=list)  # running minimum of ``objective``
    best_iteration: int = 0
    step_size: float = 0.0

    @property
    def final_objective(self) -> float:
        return self.best_objective[-1]


def zero_filled(b: np.ndarray, sens: SensLike, mask: np.ndarray) -> np.ndarray:
    return sense_adjoint(b, sens, mask)


def grad2d(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences along W (dx) and H (dy); zero in the last column/row."""
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return dx, dy


def div2d(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad2d`."""
    out = np.zeros_like(dx)
    out[..., :, :-1] += dx[..., :, :-1]
    out[..., :, 1:] -= dx[..., :, :-1]
    out[..., :-1, :] += dy[..., :-1, :]
    out[..., 1:, :] -= dy[..., :-1, :]
    return out


def tv_iso(x: np.ndarray) -> float:
    dx, dy = grad2d(x)
    return float(np.sum(np.sqrt(np.abs(dx) ** 2 + np.abs(dy) ** 2)))


def power_method_opnorm(apply_op: LinearOp, apply_adjoint: LinearOp, shape: Sequence[int],
                        n: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of a linear operator from iterations of op^H op."""
    x = crandn(make_rng(seed), shape)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for it in range(n):
        y = apply_adjoint(apply_op(x))
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            return 0.0
        x = y / norm
        new_estimate = np.sqrt(norm)
        converged = abs(new_estimate - estimate) <= tol * new_estimate
        estimate = new_estimate
        if converged:
            logger.debug("Power method converged after %d iterations: %.8g", it + 1, estimate)
            break
    return float(estimate)


def tv_operator_norm(sens: SensLike, mask: np.ndarray, n: int = 100) -> float:
    """||[A; grad]|| for the masked SENSE operator."""
    def forward(x):
        return (sense_forward(x, sens, mask),) + grad2d(x)

    def adjoint(v):
        return sense_adjoint(v[0], sens, mask) - div2d(v[1], v[2])

    return power_method_opnorm(forward, adjoint, np.shape(mask), n=n)


def tv_objective(x: np.ndarray, b: np.ndarray, sens: SensLike, mask: np.ndarray,
                 alpha: float) -> float:
    residual = sense_forward(x, sens, mask) - mask * b
    return float(np.sum(np.abs(residual) ** 2)) + alpha * tv_iso(x)


def _project_ball(qx: np.ndarray, qy: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    if radius == 0.0:
        return np.zeros_like(qx), np.zeros_like(qy)
    shrink = np.maximum(1.0, np.sqrt(np.abs(qx) ** 2 + np.abs(qy) ** 2) / radius)
    return qx / shrink, qy / shrink


def tv_recon(b: np.ndarray, sens: SensLike, mask: np.ndarray,
             cfg: Optional[TVConfig] = None) -> TVResult:
    """Primal-dual TV reconstruction started from the zero-filled image.

    The returned image is the iterate with the lowest objective, so it never
    scores worse than the starting point.
    """
    cfg = cfg or TVConfig()
    if cfg.alpha < 0 or cfg.n_iter < 1:
        raise ReconstructionError(f"Invalid TV settings: alpha={cfg.alpha}, n_iter={cfg.n_iter}")
    mask = np.asarray(mask, dtype=np.float64)
    if b.shape[1:] != mask.shape:
        raise ReconstructionError(f"Mask {mask.shape} does not match k-space {b.shape}")

    lipschitz = tv_operator_norm(sens, mask)
    tau = cfg.tau if cfg.tau is not None else STEP_FACTOR / lipschitz
    sigma = cfg.sigma if cfg.sigma is not None else STEP_FACTOR / lipschitz
    if tau <= 0 or sigma <= 0 or tau * sigma * lipschitz ** 2 > 1.0 + 1e-12:
        raise ReconstructionError(
            f"Step sizes tau={tau}, sigma={sigma} violate tau*sigma*L^2 <= 1 (L={lipschitz:.4f})")

    masked_b = mask * b
    x = zero_filled(b, sens, mask)
    x_bar = x.copy()
    y_data = np.zeros_like(masked_b)
    y_x = np.zeros_like(x)
    y_y = np.zeros_like(x)

    start = tv_objective(x, b, sens, mask, cfg.alpha)
    result = TVResult(image=x, objective=[start], best_objective=[start], step_size=tau)
    previous = start
    rising = 0
    for it in range(1, cfg.n_iter + 1):
        y_data = (y_data + sigma * (sense_forward(x_bar, sens, mask) - masked_b)) / (1.0 + sigma / 2.0)
        gx, gy = grad2d(x_bar)
        y_x, y_y = _project_ball(y_x + sigma * gx, y_y + sigma * gy, cfg.alpha)

        x_next = x - tau * (sense_adjoint(y_data, sens, mask) - div2d(y_x, y_y))
        x_bar = 2.0 * x_next - x
        x = x_next

        value = tv_objective(x, b, sens, mask, cfg.alpha)
        if not np.isfinite(value):
            raise TVDivergenceError(f"TV objective became non-finite at iteration {it}")
        rising = rising + 1 if (value > previous and value > start) else 0
        if rising >= DIVERGENCE_PATIENCE:
            raise TVDivergenceError(
                f"TV objective increased for {rising} consecutive iterations (at {it}: {value:.6g})")
        previous = value

        result.objective.append(value)
        if value < result.best_objective[-1]:
            result.image = x
            result.best_iteration = it
            result.best_objective.append(value)
        else:
            result.best_objective.append(result.best_objective[-1])
        if it % 50 == 0:
            logger.debug("TV iteration %d: objective %.6g (best %.6g)", it, value,
                         result.best_objective[-1])
    return result
