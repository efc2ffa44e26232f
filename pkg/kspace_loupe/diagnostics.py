"""
Finite-difference gradient suites behind the ``gradcheck`` command.

Each suite builds small seeded programs on the tape and compares the analytic
gradient of every leaf with central differences (see ``autodiff.gradcheck``).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional
import logging

import numpy as np

from .autodiff import Node, ParamStore, Tape, gradcheck_leaves, inner, record
from .mri_model import sens_pair, simulate_coils, simulate_phantom
from .numerics import fft2c, make_rng, spawn_rng, to_pair, uniform
from .recon.unrolled import (
    UnrollConfig, denoise_node, init_dc, init_denoiser, modl_forward_node, training_loss,
)
from .sampling import (
    calibration_mask, pattern_from_logits, probability_map, relaxed_binary, renormalize,
)

logger = logging.getLogger(__name__)

OPS_THRESHOLD = 1e-7
DENOISER_THRESHOLD = 1e-5
PIPELINE_THRESHOLD = 1e-4


@dataclass
class SuiteResult:
    name: str
    threshold: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with |x| >= 0.1 so kinks at 0 stay out of the difference stencil."""
    return np.where(uniform(rng, shape) < 0.5, -1.0, 1.0) * (0.1 + uniform(rng, shape))


def _weighted(node: Node, weights: np.ndarray) -> Node:
    return inner(node, node.tape.constant(weights))


def op_programs(seed: int = 0) -> Dict[str, tuple]:
    """``name -> (program, params)`` for every differentiable op."""
    rng = make_rng(seed)
    h, w = 6, 5
    pair = (2, h, w)
    coils = (3, 2, h, w)

    def unary(op, shape, values=None, **attrs):
        x = values if values is not None else rng.standard_normal(shape)
        out_shape = OUT_SHAPES.get(op, lambda s: s)(shape)
        weights = rng.standard_normal(out_shape)
        return (lambda t, n: _weighted(record(op, n["x"], **attrs), weights),
                ParamStore({"x": x}))

    def binary(op, shape_a, shape_b, a=None, b=None):
        a = a if a is not None else rng.standard_normal(shape_a)
        b = b if b is not None else rng.standard_normal(shape_b)
        probe = Tape(record=False)
        out_shape = probe.record(op, probe.constant(a), probe.constant(b)).shape
        weights = rng.standard_normal(out_shape)
        return (lambda t, n: _weighted(record(op, n["a"], n["b"]), weights),
                ParamStore({"a": a, "b": b}))

    noncalib = ~calibration_mask(8, 8, 2)
    p_low = 0.05 + 0.2 * uniform(rng, (8, 8))
    p_high = 0.5 + 0.4 * uniform(rng, (8, 8))
    renorm_weights = rng.standard_normal((8, 8))

    def renorm(p):
        return (lambda t, n: _weighted(record("renormalize", n["x"], noncalib=noncalib, target=0.3),
                                       renorm_weights),
                ParamStore({"x": p}))

    programs = {
        "add": binary("add", pair, pair),
        "sub": binary("sub", pair, pair),
        "mul": binary("mul", pair, pair),
        "div": binary("div", pair, pair, b=1.0 + uniform(rng, pair)),
        "scalar_mul": unary("scalar_mul", pair, c=-1.7),
        "scale": binary("scale", pair, (), b=np.asarray(0.8)),
        "exp": unary("exp", pair),
        "relu": unary("relu", pair, values=_away_from_zero(rng, pair)),
        "sigmoid": unary("sigmoid", pair),
        "abs_sum": unary("abs_sum", pair, values=_away_from_zero(rng, pair)),
        "sum": unary("sum", pair),
        "cmul": binary("cmul", coils, coils),
        "cmul_conj": binary("cmul_conj", coils, coils),
        "fft2c": unary("fft2c", coils),
        "ifft2c": unary("ifft2c", coils),
        "mask_mul": binary("mask_mul", (h, w), coils),
        "broadcast_coils": unary("broadcast_coils", pair, n=3),
        "sum_coils": unary("sum_coils", coils),
        "concat": binary("concat", pair, (3, h, w)),
        "split": unary("split", (4, h, w), start=1, stop=3),
        "conv2d": binary("conv2d", (2, h, w), (3, 2, 3, 3)),
        "renormalize.scale_down": renorm(p_high),
        "renormalize.scale_up": renorm(p_low),
    }

    x = rng.standard_normal((3, h, w))
    scale = 1.0 + 0.1 * rng.standard_normal(3)
    shift = rng.standard_normal(3)
    in_weights = rng.standard_normal((3, h, w))
    programs["instance_norm"] = (
        lambda t, n: _weighted(record("instance_norm", n["x"], n["scale"], n["shift"]), in_weights),
        ParamStore({"x": x, "scale": scale, "shift": shift}),
    )
    return programs


OUT_SHAPES = {
    "abs_sum": lambda s: (),
    "sum": lambda s: (),
    "broadcast_coils": lambda s: (3,) + tuple(s),
    "sum_coils": lambda s: tuple(s[1:]),
    "split": lambda s: (2,) + tuple(s[1:]),
}


def ops_suite(seed: int = 0) -> SuiteResult:
    result = SuiteResult("ops", OPS_THRESHOLD)
    for name, (program, params) in op_programs(seed).items():
        report = gradcheck_leaves(program, params, seed=seed)
        result.errors[name] = max(report.values(), default=0.0)
    return result


def denoiser_suite(seed: int = 0, size: int = 8, channels: int = 4) -> SuiteResult:
    """Denoiser output against a random target under the L1 loss."""
    rng = spawn_rng(seed, 1)
    params = ParamStore()
    init_denoiser(params, rng, channels)
    image = rng.standard_normal((2, size, size))
    target = rng.standard_normal((2, size, size))

    def program(tape: Tape, nodes: Dict[str, Node]) -> Node:
        out = denoise_node(tape.constant(image), nodes)
        return record("abs_sum", record("sub", out, tape.constant(target)))

    result = SuiteResult("denoiser", DENOISER_THRESHOLD)
    result.errors = gradcheck_leaves(program, params, seed=seed)
    return result


def pipeline_program(seed: int = 0, size: int = 16, n_coils: int = 2, channels: int = 4,
                     unroll: UnrollConfig = UnrollConfig(n_blocks=2, n_cg=5),
                     gamma: float = 0.25, slope: float = 0.25, calib_size: int = 4):
    """Full training loss with the uniform draws frozen.

    The binary mask is replaced by :func:`relaxed_binary`, whose value equals the
    frozen draw and whose Jacobian is the straight-through identity, so central
    differences see the same gradient the trainer uses.
    """
    rng = spawn_rng(seed, 2)
    image = simulate_phantom(rng, size, size)
    sens = simulate_coils(rng, size, size, n_coils)
    kspace = to_pair(fft2c(sens.maps * image))
    label = to_pair(image)
    calib = calibration_mask(size, size, calib_size)

    params = ParamStore()
    init_denoiser(params, rng, channels)
    init_dc(params, rho=-1.0)
    params.add("pattern.w", rng.uniform(-1.0, 1.0, size=(size, size)))

    z = uniform(rng, (size, size))
    p_frozen = pattern_from_logits(params["pattern.w"], slope, gamma, calib)
    u_frozen = (z < p_frozen).astype(np.float64)

    def program(tape: Tape, nodes: Dict[str, Node]) -> Node:
        p_prime = renormalize(probability_map(nodes["pattern.w"], slope), gamma, calib)
        mask = relaxed_binary(p_prime, u_frozen, p_frozen)
        outputs = modl_forward_node(tape.constant(kspace), tape.constant(sens_pair(sens)), mask,
                                    nodes, unroll)
        return training_loss(outputs, tape.constant(label))

    return program, params


def pipeline_suite(seed: int = 0) -> SuiteResult:
    program, params = pipeline_program(seed)
    result = SuiteResult("pipeline", PIPELINE_THRESHOLD)
    result.errors = gradcheck_leaves(program, params, seed=seed)
    return result


SUITES = {
    "ops": ops_suite,
    "denoiser": denoiser_suite,
    "pipeline": pipeline_suite,
}


def run_suites(names: Optional[List[str]] = None, seed: int = 0) -> List[SuiteResult]:
    results = []
    for name in names or list(SUITES):
        logger.info("Running gradient suite %s", name)
        result = SUITES[name](seed)
        logger.info("%s: max relative error %.3e (threshold %.0e)", name, result.max_error,
                    result.threshold)
        results.append(result)
    return results
