"""
Joint training of the sampling pattern and the unrolled reconstructor.

Checkpoint file "KCK1"::

    bytes 0-3   magic b"KCK1"
    u32         header length in bytes (little endian)
    header      UTF-8 JSON: format, config, config_hash, epoch, val_psnr,
                params = [{"name", "shape"}, ...] in storage order
    payload     every parameter as little-endian f64, row-major, in header order
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import json
import logging
import struct

import numpy as np

from .autodiff import ParamStore, Tape
from .config import RunConfig
from .dataset import load_manifest, load_split
from .kspace_io import BadMagic, KspaceFormatError, Truncated, params_from_bytes, params_to_bytes
from .metrics import psnr
from .numerics import make_rng, spawn_rng, to_pair, uniform
from .optim import AdamState, OptimizerError, adam_step
from .recon.unrolled import (
    RHO_NAME, UnrollConfig, init_dc, init_denoiser, modl_forward_node, reconstruct, training_loss,
)
from .sampling import (
    PatternParams, calibration_mask, init_pattern_logits, sample_approx, sample_binary,
)
from .types import KSpaceSample, KspaceLoupeError, SamplingMode, Split

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KCK1"
CHECKPOINT_FORMAT = "kspace-loupe-checkpoint/1"
PATTERN_NAME = "pattern.w"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
HISTORY_FILE = "history.json"

# sub-stream keys under seeds.sampling
ORDER_STREAM = 0
TRAIN_DRAW_STREAM = 1

PathLike = Union[str, Path]


class TrainingError(KspaceLoupeError):
    """Raised when training cannot proceed (bad data, non-finite loss)"""
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    config: RunConfig
    epoch: int
    val_psnr: Optional[float] = None

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def init_params(config: RunConfig) -> ParamStore:
    """Denoiser, rho and pattern logits drawn from ``seeds.init``."""
    rng = make_rng(config.seeds.init)
    store = ParamStore()
    init_denoiser(store, rng, config.model.channels)
    init_dc(store)
    store.add(PATTERN_NAME, init_pattern_logits(rng, config.data.height, config.data.width))
    return store


def unroll_config(config: RunConfig, evaluation: bool = False) -> UnrollConfig:
    n_cg = config.model.n_cg_eval if evaluation else config.model.n_cg
    return UnrollConfig(n_blocks=config.model.n_blocks, n_cg=n_cg)


def calib_for(config: RunConfig) -> np.ndarray:
    return calibration_mask(config.data.height, config.data.width, config.pattern.calib_size)


def pattern_params(params: ParamStore, config: RunConfig) -> PatternParams:
    p = config.pattern
    return PatternParams(params[PATTERN_NAME], p.slope, p.gamma, calib_for(config))


def probability_pattern(params: ParamStore, config: RunConfig) -> np.ndarray:
    """Renormalized P' of the current logits."""
    return pattern_params(params, config).probabilities()


def learned_topk_mask(params: ParamStore, config: RunConfig) -> np.ndarray:
    return pattern_params(params, config).topk()


# Checkpoints

def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    names = checkpoint.params.names()
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": checkpoint.config.to_dict(),
        "config_hash": checkpoint.config_hash,
        "epoch": checkpoint.epoch,
        "val_psnr": checkpoint.val_psnr,
        "params": [{"name": n, "shape": list(checkpoint.params[n].shape)} for n in names],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(params_to_bytes([checkpoint.params[n] for n in names]))


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise KspaceFormatError(f"Unable to read checkpoint {path}: {e}") from e
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a KCK1 checkpoint")
    if len(data) < 8:
        raise Truncated(f"{path}: missing header length")
    (length,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + length:
        raise Truncated(f"{path}: header of {length} bytes is cut off")
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise KspaceFormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        names = [p["name"] for p in header["params"]]
        shapes = [tuple(p["shape"]) for p in header["params"]]
        config = RunConfig.from_dict(header["config"])
        epoch = int(header["epoch"])
        val_psnr = header["val_psnr"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise KspaceFormatError(f"{path}: malformed checkpoint header: {e}") from e
    arrays = params_from_bytes(data[8 + length:], shapes, str(path))
    return Checkpoint(params=ParamStore(dict(zip(names, arrays))), config=config, epoch=epoch,
                      val_psnr=None if val_psnr is None else float(val_psnr))


# Training

def _sample_pairs(sample: KSpaceSample) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return to_pair(sample.kspace), to_pair(sample.sens.maps), to_pair(sample.label)


def sample_gradient(params: ParamStore, sample: KSpaceSample, config: RunConfig,
                    z: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and gradients for one sample with the uniform draws ``z`` frozen."""
    pattern = config.pattern
    kspace, sens, label = _sample_pairs(sample)
    tape = Tape()
    nodes = params.bind(tape)
    p_prime = pattern_params(params, config).probability_node(nodes[PATTERN_NAME])
    if config.sampling_mode is SamplingMode.BS:
        mask = sample_binary(p_prime, z=z)
    else:
        mask = sample_approx(p_prime, z, pattern.b_slope)
    outputs = modl_forward_node(tape.constant(kspace), tape.constant(sens), mask, nodes,
                                unroll_config(config))
    loss = training_loss(outputs, tape.constant(label))
    return float(loss.value), tape.backward(loss)


def _param_norms(params: ParamStore) -> str:
    return ", ".join(f"{n}={np.linalg.norm(params[n]):.3g}" for n in params.names())


def train_epoch(params: ParamStore, state: AdamState, samples: List[Tuple[str, KSpaceSample]],
                config: RunConfig, epoch: int) -> float:
    """One pass over ``samples`` in a seeded order; returns the mean per-sample loss."""
    t = config.train
    group_lr = {prefix: lr for prefix, lr in (("denoiser.", t.lr_denoiser), (RHO_NAME, t.lr_dc),
                                               (PATTERN_NAME, t.lr_pattern)) if lr is not None}
    order = spawn_rng(config.seeds.sampling, ORDER_STREAM, epoch).permutation(len(samples))
    shape = (config.data.height, config.data.width)
    losses = []
    for start in range(0, len(order), t.batch_size):
        batch = order[start:start + t.batch_size]
        total: Dict[str, np.ndarray] = {}
        for position in batch:
            sample_id, sample = samples[position]
            z = uniform(spawn_rng(config.seeds.sampling, TRAIN_DRAW_STREAM, epoch, int(position)),
                        shape)
            loss, grads = sample_gradient(params, sample, config, z)
            if not np.isfinite(loss):
                raise TrainingError(f"Non-finite loss at epoch {epoch}, sample {sample_id}; "
                                    f"parameter norms: {_param_norms(params)}")
            losses.append(loss)
            for name, g in grads.items():
                total[name] = total[name] + g if name in total else g
        mean_grads = {name: g / len(batch) for name, g in total.items()}
        try:
            adam_step(params, mean_grads, state, t.lr, group_lr)
        except OptimizerError as e:
            raise TrainingError(f"Epoch {epoch}: {e}; parameter norms: {_param_norms(params)}") from e
    return float(np.mean(losses)) if losses else 0.0


def validation_psnr(params: ParamStore, samples: List[Tuple[str, KSpaceSample]],
                    config: RunConfig) -> Optional[float]:
    """Mean PSNR under the deterministic top-gamma pattern; None without samples."""
    if not samples:
        return None
    mask = learned_topk_mask(params, config)
    unroll = unroll_config(config, evaluation=True)
    return float(np.mean([psnr(reconstruct(s, mask, params, unroll), s.label) for _, s in samples]))


def _check_dimensions(config: RunConfig, height: int, width: int) -> None:
    if (height, width) != (config.data.height, config.data.width):
        raise TrainingError(f"Dataset images are {height}x{width}, configuration expects "
                            f"{config.data.height}x{config.data.width}")


def train(config: RunConfig, manifest_path: Optional[PathLike] = None,
          checkpoint_dir: Optional[PathLike] = None) -> TrainResult:
    """Train every parameter group jointly and write best/last checkpoints and the history."""
    manifest = load_manifest(manifest_path or config.train.manifest)
    _check_dimensions(config, manifest.height, manifest.width)
    train_samples = load_split(manifest, Split.TRAIN)
    val_samples = load_split(manifest, Split.VAL)
    if config.train.epochs > 0 and not train_samples:
        raise TrainingError("The manifest has no training samples")
    out_dir = Path(checkpoint_dir or config.train.checkpoint_dir)
    logger.info("Training %s mode on %d samples (%d validation) for %d epochs",
                config.train.mode, len(train_samples), len(val_samples), config.train.epochs)

    params = init_params(config)
    state = AdamState.for_params(params)
    score = validation_psnr(params, val_samples, config)
    best = Checkpoint(params.copy(), config, 0, score)
    history: List[Dict[str, Any]] = []
    for epoch in range(1, config.train.epochs + 1):
        loss = train_epoch(params, state, train_samples, config, epoch)
        score = validation_psnr(params, val_samples, config)
        improved = score is None or best.val_psnr is None or score > best.val_psnr
        if improved:
            best = Checkpoint(params.copy(), config, epoch, score)
        history.append({"epoch": epoch, "train_loss": loss, "val_psnr": score, "best": improved})
        logger.info("Epoch %d/%d: train loss %.6g, val PSNR %s%s", epoch, config.train.epochs, loss,
                    "n/a" if score is None else f"{score:.3f} dB", " (best)" if improved else "")

    last = Checkpoint(params.copy(), config, config.train.epochs, score)
    result = TrainResult(best=best, last=last, history=history,
                         best_path=out_dir / BEST_CHECKPOINT, last_path=out_dir / LAST_CHECKPOINT)
    save_checkpoint(result.best_path, best)
    save_checkpoint(result.last_path, last)
    (out_dir / HISTORY_FILE).write_text(json.dumps(history, indent=2) + "\n")
    logger.info("Saved checkpoints to %s (best epoch %d)", out_dir, best.epoch)
    return result
