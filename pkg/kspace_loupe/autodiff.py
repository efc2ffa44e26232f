"""
Define-by-run reverse-mode differentiation over real float64 tensors.

Every recorded op computes its value eagerly and returns a vector-Jacobian
closure holding whatever locals the backward pass needs. Complex quantities
travel as real ``(..., 2, H, W)`` channel pairs with explicit real Jacobians:
the transpose of multiplication by ``s`` is multiplication by ``conj(s)`` and the
transpose of the unitary centered FFT is the centered inverse FFT.

A fresh :class:`Tape` is built for every forward pass. ``Tape(record=False)``
evaluates the same program without keeping the graph.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import expit

from .numerics import fft2c_pair, ifft2c_pair, make_rng
from .types import KspaceLoupeError

logger = logging.getLogger(__name__)

INSTANCE_NORM_EPS = 1e-5

Array = np.ndarray
Vjp = Callable[[Array], Tuple[Optional[Array], ...]]


class AutodiffError(KspaceLoupeError):
    """Raised for unsupported ops, shape mismatches and invalid backward passes"""
    pass


@dataclass(eq=False)
class Node:
    id: int
    op: str
    value: Array
    tape: "Tape" = field(repr=False)
    inputs: Tuple["Node", ...] = field(default=(), repr=False)
    vjp: Optional[Vjp] = field(default=None, repr=False)
    requires_grad: bool = False
    name: Optional[str] = None

    @property
    def parents(self) -> Tuple[int, ...]:
        return tuple(n.id for n in self.inputs)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.record("scalar_mul", self, c=float(other))
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self.tape.record("div", self, other)

    def __neg__(self):
        return self.tape.record("scalar_mul", self, c=-1.0)


# Op library: each entry maps input values (+ attrs) to (output, vjp)

def _same_shape(op: str, *arrays: Array) -> None:
    shapes = [a.shape for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        raise AutodiffError(f"{op}: shape mismatch {shapes}")


def _op_add(a: Array, b: Array):
    _same_shape("add", a, b)
    return a + b, lambda g: (g, g)


def _op_sub(a: Array, b: Array):
    _same_shape("sub", a, b)
    return a - b, lambda g: (g, -g)


def _op_mul(a: Array, b: Array):
    _same_shape("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


def _op_div(a: Array, b: Array):
    _same_shape("div", a, b)
    out = a / b
    return out, lambda g: (g / b, -g * out / b)


def _op_scalar_mul(x: Array, c: float):
    return x * c, lambda g: (g * c,)


def _op_scale(x: Array, s: Array):
    if s.shape != ():
        raise AutodiffError(f"scale: expected a scalar factor, got shape {s.shape}")
    return x * s, lambda g: (g * s, np.asarray(np.sum(g * x)))


def _op_exp(x: Array):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _op_relu(x: Array):
    active = x > 0
    return np.where(active, x, 0.0), lambda g: (np.where(active, g, 0.0),)


def _op_sigmoid(x: Array):
    out = expit(x)
    return out, lambda g: (g * out * (1.0 - out),)


def _op_abs_sum(x: Array):
    # sign(0) == 0 gives the zero subgradient at the kink
    return np.asarray(np.sum(np.abs(x))), lambda g: (g * np.sign(x),)


def _op_sum(x: Array):
    return np.asarray(np.sum(x)), lambda g: (np.broadcast_to(g, x.shape).copy(),)


def _check_pair(op: str, x: Array) -> None:
    if x.ndim < 3 or x.shape[-3] != 2:
        raise AutodiffError(f"{op}: expected a (..., 2, H, W) complex pair, got shape {x.shape}")


def _pair_mul(a: Array, b: Array, conj_a: bool = False) -> Array:
    ar, ai = a[..., 0, :, :], a[..., 1, :, :]
    br, bi = b[..., 0, :, :], b[..., 1, :, :]
    if conj_a:
        ai = -ai
    return np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-3)


def _op_cmul(a: Array, b: Array):
    _check_pair("cmul", a)
    _same_shape("cmul", a, b)
    return _pair_mul(a, b), lambda g: (_pair_mul(b, g, conj_a=True), _pair_mul(a, g, conj_a=True))


def _op_cmul_conj(a: Array, b: Array):
    """conj(a) * b"""
    _check_pair("cmul_conj", a)
    _same_shape("cmul_conj", a, b)

    def vjp(g):
        ga = _pair_mul(g, b, conj_a=True)
        return ga, _pair_mul(a, g)

    return _pair_mul(a, b, conj_a=True), vjp


def _op_fft2c(x: Array):
    _check_pair("fft2c", x)
    return fft2c_pair(x), lambda g: (ifft2c_pair(g),)


def _op_ifft2c(x: Array):
    _check_pair("ifft2c", x)
    return ifft2c_pair(x), lambda g: (fft2c_pair(g),)


def _op_mask_mul(m: Array, x: Array):
    if m.ndim != 2 or x.shape[-2:] != m.shape:
        raise AutodiffError(f"mask_mul: mask shape {m.shape} does not match tensor shape {x.shape}")
    lead = tuple(range(x.ndim - 2))
    return m * x, lambda g: (np.sum(g * x, axis=lead) if lead else g * x, g * m)


def _op_broadcast_coils(x: Array, n: int):
    _check_pair("broadcast_coils", x)
    if x.ndim != 3:
        raise AutodiffError(f"broadcast_coils: expected (2, H, W), got shape {x.shape}")
    return np.broadcast_to(x, (n,) + x.shape).copy(), lambda g: (np.sum(g, axis=0),)


def _op_sum_coils(y: Array):
    if y.ndim != 4 or y.shape[1] != 2:
        raise AutodiffError(f"sum_coils: expected (N_c, 2, H, W), got shape {y.shape}")
    n = y.shape[0]
    return np.sum(y, axis=0), lambda g: (np.broadcast_to(g, (n,) + g.shape).copy(),)


def _op_concat(a: Array, b: Array):
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise AutodiffError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[0]
    return np.concatenate([a, b], axis=0), lambda g: (g[:ca], g[ca:])


def _op_split(x: Array, start: int, stop: int):
    if x.ndim != 3 or not 0 <= start < stop <= x.shape[0]:
        raise AutodiffError(f"split: invalid channel range [{start}, {stop}) for shape {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x)
        gx[start:stop] = g
        return (gx,)

    return x[start:stop].copy(), vjp


def _im2col(x: Array) -> Array:
    """(C, H, W) -> (C*9, H*W) patches of the zero-padded input"""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w))
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, k] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w)


def _col2im(cols: Array, c: int, h: int, w: int) -> Array:
    cols = cols.reshape(c, 9, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        xp[:, dy:dy + h, dx:dx + w] += cols[:, k]
    return xp[:, 1:-1, 1:-1]


def _op_conv2d(x: Array, w: Array):
    """3x3 cross-correlation, stride 1, zero padding, no bias"""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise AutodiffError(f"conv2d: input {x.shape} incompatible with weights {w.shape}")
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    cols = _im2col(x)
    wmat = w.reshape(c_out, c_in * 9)
    out = (wmat @ cols).reshape(c_out, h, wd)

    def vjp(g):
        gmat = g.reshape(c_out, h * wd)
        gw = (gmat @ cols.T).reshape(w.shape)
        gx = _col2im(wmat.T @ gmat, c_in, h, wd)
        return gx, gw

    return out, vjp


def _op_instance_norm(x: Array, scale: Array, shift: Array):
    if x.ndim != 3 or scale.shape != (x.shape[0],) or shift.shape != (x.shape[0],):
        raise AutodiffError(
            f"instance_norm: input {x.shape} incompatible with affine {scale.shape}/{shift.shape}")
    n = x.shape[1] * x.shape[2]
    mean = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=(1, 2), keepdims=True) + INSTANCE_NORM_EPS)
    xhat = centered * inv_std
    out = scale[:, None, None] * xhat + shift[:, None, None]

    def vjp(g):
        gshift = g.sum(axis=(1, 2))
        gscale = (g * xhat).sum(axis=(1, 2))
        gxhat = g * scale[:, None, None]
        gx = (inv_std / n) * (
            n * gxhat
            - gxhat.sum(axis=(1, 2), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(1, 2), keepdims=True)
        )
        return gx, gscale, gshift

    return out, vjp


def _op_renormalize(p: Array, noncalib: Array, target: float):
    """Two-branch rescaling of the non-calibration entries to mean ``target``;
    calibration entries are set to 1."""
    if noncalib.shape != p.shape:
        raise AutodiffError(f"renormalize: mask shape {noncalib.shape} does not match {p.shape}")
    nc = noncalib.astype(np.float64)
    n = nc.sum()
    mu = float((p * nc).sum() / n)
    calib = 1.0 - nc
    if mu >= target:
        ratio = target / mu
        out = nc * p * ratio + calib

        def vjp(g):
            gn = g * nc
            coupling = ratio / (mu * n) * float((gn * p).sum())
            return (nc * (ratio * g - coupling),)
    else:
        c = (1.0 - target) / (1.0 - mu)
        out = nc * (1.0 - (1.0 - p) * c) + calib

        def vjp(g):
            gn = g * nc
            coupling = (1.0 - target) / ((1.0 - mu) ** 2 * n) * float((gn * (1.0 - p)).sum())
            return (nc * (c * g - coupling),)

    return out, vjp


def _op_straight_through(p: Array, z: Array):
    """Forward: 1_{z < p}. Backward: identity w.r.t. p."""
    _same_shape("straight_through", p, z)
    return (z < p).astype(np.float64), lambda g: (g, None)


OPS: Dict[str, Callable[..., Tuple[Array, Vjp]]] = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "scalar_mul": _op_scalar_mul,
    "scale": _op_scale,
    "exp": _op_exp,
    "relu": _op_relu,
    "sigmoid": _op_sigmoid,
    "abs_sum": _op_abs_sum,
    "sum": _op_sum,
    "cmul": _op_cmul,
    "cmul_conj": _op_cmul_conj,
    "fft2c": _op_fft2c,
    "ifft2c": _op_ifft2c,
    "mask_mul": _op_mask_mul,
    "broadcast_coils": _op_broadcast_coils,
    "sum_coils": _op_sum_coils,
    "concat": _op_concat,
    "split": _op_split,
    "conv2d": _op_conv2d,
    "instance_norm": _op_instance_norm,
    "renormalize": _op_renormalize,
    "straight_through": _op_straight_through,
}

_ELEMENTWISE = {"add", "sub", "mul", "div"}


class Tape:
    """Records ops in creation order; parents always precede children."""

    def __init__(self, record: bool = True):
        self.recording = record
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Node] = {}
        self._next_id = 0

    def _new_node(self, op: str, value: Array, inputs: Tuple[Node, ...] = (),
                  vjp: Optional[Vjp] = None, requires_grad: bool = False,
                  name: Optional[str] = None) -> Node:
        node = Node(self._next_id, op, value, self, inputs if self.recording else (),
                    vjp if self.recording else None, requires_grad, name)
        self._next_id += 1
        if self.recording:
            self.nodes.append(node)
        return node

    def leaf(self, value: Array, name: str) -> Node:
        if name in self.leaves:
            raise AutodiffError(f"Duplicate leaf name: {name}")
        node = self._new_node("leaf", np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.leaves[name] = node
        return node

    def constant(self, value: Union[Array, float]) -> Node:
        return self._new_node("const", np.asarray(value, dtype=np.float64))

    def _lift(self, op_kind: str, inputs: Sequence[Any]) -> List[Node]:
        ref_shape = next((x.shape for x in inputs if isinstance(x, Node)), None)
        lifted = []
        for x in inputs:
            if isinstance(x, Node):
                if x.tape is not self:
                    raise AutodiffError(f"{op_kind}: input node belongs to a different tape")
                lifted.append(x)
                continue
            value = np.asarray(x, dtype=np.float64)
            if op_kind in _ELEMENTWISE and value.ndim == 0 and ref_shape is not None:
                value = np.full(ref_shape, float(value))
            lifted.append(self.constant(value))
        return lifted

    def record(self, op_kind: str, *inputs: Any, **attrs: Any) -> Node:
        fn = OPS.get(op_kind)
        if fn is None:
            raise AutodiffError(f"Unsupported op: {op_kind}")
        nodes = self._lift(op_kind, inputs)
        value, vjp = fn(*[n.value for n in nodes], **attrs)
        requires_grad = any(n.requires_grad for n in nodes)
        return self._new_node(op_kind, np.asarray(value, dtype=np.float64), tuple(nodes),
                              vjp if requires_grad else None, requires_grad)

    def backward(self, loss: Node) -> Dict[str, Array]:
        """Gradients of a scalar ``loss`` w.r.t. every leaf (zeros for unused leaves)."""
        if not self.recording:
            raise AutodiffError("backward() requires a recording tape")
        if loss.value.size != 1:
            raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, Array] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            if node.id > loss.id:
                continue
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            if node.op != "leaf":
                del grads[node.id]
            for parent, pg in zip(node.inputs, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
        return {name: grads.get(leaf.id, np.zeros_like(leaf.value))
                for name, leaf in self.leaves.items()}


def record(op_kind: str, *inputs: Any, **attrs: Any) -> Node:
    """Record ``op_kind`` on the tape of the first Node input."""
    tape = next((x.tape for x in inputs if isinstance(x, Node)), None)
    if tape is None:
        raise AutodiffError(f"{op_kind}: at least one input must be a Node")
    return tape.record(op_kind, *inputs, **attrs)


def inner(a: Node, b: Node) -> Node:
    """Real inner product sum(a * b); for pairs this is Re<a, b>."""
    return record("sum", record("mul", a, b))


class ParamStore:
    """Named trainable tensors. Every trainable quantity lives here and nowhere else."""

    def __init__(self, values: Optional[Mapping[str, Array]] = None):
        self._values: Dict[str, Array] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value: Array) -> None:
        if name in self._values:
            raise AutodiffError(f"Parameter already defined: {name}")
        self._values[name] = np.array(value, dtype=np.float64)

    def set(self, name: str, value: Array) -> None:
        if name not in self._values:
            raise AutodiffError(f"Unknown parameter: {name}")
        value = np.array(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise AutodiffError(
                f"Shape mismatch for {name}: {value.shape} vs {self._values[name].shape}")
        self._values[name] = value

    def __getitem__(self, name: str) -> Array:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def bind(self, tape: Tape) -> Dict[str, Node]:
        return {name: tape.leaf(value, name) for name, value in self._values.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._values.items()})

    def snapshot(self) -> "ParamStore":
        """Read-only copy that can be shared between threads."""
        snap = self.copy()
        for value in snap._values.values():
            value.flags.writeable = False
        return snap

    def replace(self, name: str, value: Array) -> "ParamStore":
        out = self.copy()
        out.set(name, value)
        return out

    def identical_to(self, other: "ParamStore") -> bool:
        return (self.names() == other.names()
                and all(self[n].tobytes() == other[n].tobytes() for n in self.names()))


Program = Callable[[Tape, Dict[str, Node]], Node]


def evaluate(f: Program, params: ParamStore) -> float:
    tape = Tape(record=False)
    return float(f(tape, params.bind(tape)).value)


def gradient(f: Program, params: ParamStore) -> Tuple[float, Dict[str, Array]]:
    tape = Tape()
    loss = f(tape, params.bind(tape))
    return float(loss.value), tape.backward(loss)


def gradcheck_leaves(f: Program, params: ParamStore, eps: float = 1e-6,
                     seed: int = 0, max_coords: int = 200) -> Dict[str, float]:
    """Per-leaf worst relative error of the analytic gradient against central differences.

    The relative error of a leaf is max|analytic - numeric| / max(max|analytic|, max|numeric|)
    over the checked coordinates; leaves larger than ``max_coords`` are checked on a
    seeded random subsample of ``max_coords`` coordinates.
    """
    _, grads = gradient(f, params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"Non-finite gradient for leaf {name}")

    rng = make_rng(seed)
    report: Dict[str, float] = {}
    for name in params.names():
        base = params[name]
        flat_grad = grads[name].reshape(-1)
        size = base.size
        if size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            coords = np.arange(size)
        numeric = np.empty(len(coords))
        for k, i in enumerate(coords):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            f_plus = evaluate(f, params.replace(name, plus.reshape(base.shape)))
            f_minus = evaluate(f, params.replace(name, minus.reshape(base.shape)))
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
        analytic = flat_grad[coords]
        scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        err = 0.0 if scale == 0.0 else float(np.max(np.abs(analytic - numeric)) / scale)
        logger.debug("gradcheck %s: %d coords, rel err %.3e", name, len(coords), err)
        report[name] = err
    return report


def gradcheck(f: Program, params: ParamStore, eps: float = 1e-6,
              seed: int = 0, max_coords: int = 200) -> float:
    """Worst normwise relative error over every leaf.

    Per leaf the error is max|analytic - numeric| divided by the largest gradient
    magnitude of that leaf, so near-zero entries are judged against the scale of
    the whole gradient rather than against themselves. See :func:`gradcheck_leaves`.
    """
    report = gradcheck_leaves(f, params, eps, seed, max_coords)
    return max(report.values(), default=0.0)
