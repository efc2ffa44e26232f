"""
Unrolled reconstruction network.

K blocks share one five-layer residual CNN denoiser and one data-consistency
weight lambda = exp(rho). Each block denoises the current image and then solves
(A^H A + lambda I) x = A^H b + lambda z with a fixed number of conjugate-gradient
steps recorded on the tape, so gradients reach the denoiser, rho and the mask.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple
import logging

import numpy as np

from ..autodiff import Node, ParamStore, Tape, inner, record
from ..mri_model import SensLike, sens_pair, sense_adjoint_node, sense_normal_node
from ..numerics import from_pair, to_pair
from ..types import KSpaceSample
from . import ReconstructionError

logger = logging.getLogger(__name__)

N_CONV = 5
RHO_NAME = "dc.rho"


@dataclass(frozen=True)
class UnrollConfig:
    n_blocks: int = 5
    n_cg: int = 10

    def __post_init__(self):
        if self.n_blocks < 1 or self.n_cg < 1:
            raise ReconstructionError(
                f"Unrolling needs n_blocks >= 1 and n_cg >= 1, got {self.n_blocks}/{self.n_cg}")


def conv_name(i: int) -> str:
    return f"denoiser.conv{i}.weight"


def norm_names(i: int) -> Tuple[str, str]:
    return f"denoiser.norm{i}.scale", f"denoiser.norm{i}.shift"


def denoiser_shapes(channels: int) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes of the 2 -> C -> C -> C -> C -> 2 denoiser."""
    widths = [2] + [channels] * (N_CONV - 1) + [2]
    shapes: Dict[str, Tuple[int, ...]] = {}
    for i in range(N_CONV):
        shapes[conv_name(i)] = (widths[i + 1], widths[i], 3, 3)
        if i < N_CONV - 1:
            scale, shift = norm_names(i)
            shapes[scale] = (widths[i + 1],)
            shapes[shift] = (widths[i + 1],)
    return shapes


def init_denoiser(store: ParamStore, rng: np.random.Generator, channels: int = 16) -> None:
    """He-normal weights (last layer x0.1), unit IN scale, zero IN shift."""
    for name, shape in denoiser_shapes(channels).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * 9
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name == conv_name(N_CONV - 1):
                value *= 0.1
        elif name.endswith(".scale"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)


def init_dc(store: ParamStore, rho: float = 0.0) -> None:
    store.add(RHO_NAME, np.asarray(rho, dtype=np.float64))


def denoise_node(x: Node, params: Mapping[str, Node]) -> Node:
    h = x
    for i in range(N_CONV - 1):
        scale, shift = norm_names(i)
        h = record("conv2d", h, params[conv_name(i)])
        h = record("instance_norm", h, params[scale], params[shift])
        h = record("relu", h)
    residual = record("conv2d", h, params[conv_name(N_CONV - 1)])
    return record("add", x, residual)


def denoise(x: np.ndarray, store: ParamStore) -> np.ndarray:
    tape = Tape(record=False)
    return from_pair(denoise_node(tape.constant(to_pair(x)), store.bind(tape)).value)


def data_consistency_node(z: Node, b: Node, sens: Node, mask: Node, lam: Node,
                          n_cg: int) -> Node:
    """n_cg CG steps on (A^H A + lam I) x = A^H b + lam z, starting from x = 0.

    ``b`` is fully sampled k-space; the mask enters through A^H.
    """
    if float(lam.value) <= 0:
        raise ReconstructionError(f"Data-consistency weight must be positive, got {float(lam.value)}")
    if n_cg < 1:
        raise ReconstructionError(f"n_cg must be >= 1, got {n_cg}")
    if b.shape != sens.shape or z.shape != sens.shape[1:]:
        raise ReconstructionError(
            f"data_consistency: image {z.shape}, data {b.shape}, sensitivities {sens.shape}")

    def normal(v: Node) -> Node:
        return record("add", sense_normal_node(v, sens, mask), record("scale", v, lam))

    r = record("add", sense_adjoint_node(b, sens, mask), record("scale", z, lam))
    p = r
    rr = inner(r, r)
    x = None
    for it in range(n_cg):
        if float(rr.value) == 0.0:
            logger.debug("CG converged exactly after %d iterations", it)
            break
        ap = normal(p)
        alpha = record("div", rr, inner(p, ap))
        step = record("scale", p, alpha)
        x = step if x is None else record("add", x, step)
        r = record("sub", r, record("scale", ap, alpha))
        rr_next = inner(r, r)
        p = record("add", r, record("scale", p, record("div", rr_next, rr)))
        rr = rr_next
    if x is None:
        x = record("scalar_mul", z, c=0.0)
    return x


def modl_forward_node(b: Node, sens: Node, mask: Node, params: Mapping[str, Node],
                      unroll: UnrollConfig) -> List[Node]:
    """Returns the K block outputs x^1..x^K (x^0, the zero-filled input, excluded)."""
    lam = record("exp", params[RHO_NAME])
    x = sense_adjoint_node(b, sens, mask)
    outputs = []
    for _ in range(unroll.n_blocks):
        z = denoise_node(x, params)
        x = data_consistency_node(z, b, sens, mask, lam, unroll.n_cg)
        outputs.append(x)
    return outputs


def training_loss(xs: List[Node], target: Node) -> Node:
    """sum_k ||x^k - x*||_1 with |re| + |im| per pixel."""
    if not xs:
        raise ReconstructionError("training_loss needs at least one reconstruction")
    total = None
    for x in xs:
        term = record("abs_sum", record("sub", x, target))
        total = term if total is None else record("add", total, term)
    return total


# Array-level wrappers (evaluation-mode tape)

def _check_inputs(b: np.ndarray, sens: SensLike, mask: np.ndarray) -> np.ndarray:
    pair = sens_pair(sens)
    if b.shape != pair.shape[:1] + pair.shape[2:]:
        raise ReconstructionError(f"k-space {b.shape} does not match sensitivities {pair.shape}")
    if np.shape(mask) != b.shape[1:]:
        raise ReconstructionError(f"Mask {np.shape(mask)} does not match image {b.shape[1:]}")
    return pair


def data_consistency(z: np.ndarray, b: np.ndarray, sens: SensLike, mask: np.ndarray,
                     lam: float, n_cg: int) -> np.ndarray:
    pair = _check_inputs(b, sens, mask)
    tape = Tape(record=False)
    out = data_consistency_node(tape.constant(to_pair(z)), tape.constant(to_pair(b)),
                                tape.constant(pair), tape.constant(mask),
                                tape.constant(lam), n_cg)
    return from_pair(out.value)


def modl_forward(b: np.ndarray, sens: SensLike, mask: np.ndarray, store: ParamStore,
                 unroll: UnrollConfig) -> List[np.ndarray]:
    pair = _check_inputs(b, sens, mask)
    tape = Tape(record=False)
    outputs = modl_forward_node(tape.constant(to_pair(b)), tape.constant(pair),
                                tape.constant(mask), store.bind(tape), unroll)
    return [from_pair(x.value) for x in outputs]


def reconstruct(sample: KSpaceSample, mask: np.ndarray, store: ParamStore,
                unroll: UnrollConfig) -> np.ndarray:
    """Final block output x^K for one sample."""
    return modl_forward(sample.kspace, sample.sens, mask, store, unroll)[-1]
