"""
Evaluation harness: fixed binary pattern, reconstruction, metrics and reports.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import csv
import io
import json
import logging
import os

import numpy as np

from .autodiff import ParamStore, Tape
from .config import THREADS_ENV, ConfigError, RunConfig
from .dataset import load_manifest, load_split
from .kspace_io import KspaceFormatError, read_tensor
from .metrics import aggregate, psnr, ssim
from .numerics import spawn_rng
from .recon.classical import tv_recon, zero_filled
from .recon.unrolled import reconstruct
from .sampling import SamplingError, sample_binary, vd_pattern
from .trainer import (
    PATTERN_NAME, Checkpoint, calib_for, learned_topk_mask, load_checkpoint, probability_pattern,
    unroll_config,
)
from .types import (
    KSpaceSample, KspaceLoupeError, MetricReport, PatternMode, ReconMethod, SampleMetrics, Split,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("sample_id", "method", "pattern", "psnr_db", "ssim")

# sub-stream keys under seeds.sampling
EVAL_DRAW_STREAM = 2
VD_STREAM = 3

PathLike = Union[str, Path]


class EvaluationError(KspaceLoupeError):
    """Raised when an evaluation cannot be set up"""
    pass


@dataclass
class EvaluationResult:
    report: MetricReport
    mask: np.ndarray
    csv_path: Optional[Path] = None
    json_path: Optional[Path] = None


def worker_count() -> int:
    """Threads for per-sample work: ``KSPACE_LOUPE_THREADS`` or the logical core count."""
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}")
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {count}")
    return count


def load_pattern_file(path: PathLike, shape: Tuple[int, int]) -> np.ndarray:
    mask = read_tensor(path)
    if np.iscomplexobj(mask) or mask.shape != tuple(shape):
        raise EvaluationError(f"{path}: expected a real {shape} mask, got {mask.dtype} {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise EvaluationError(f"{path}: mask entries must be 0 or 1")
    return mask


def learned_draw_mask(params: ParamStore, config: RunConfig) -> np.ndarray:
    """One binary draw from the learned P' (seeded from ``seeds.sampling``)."""
    p_prime = probability_pattern(params, config)
    rng = spawn_rng(config.seeds.sampling, EVAL_DRAW_STREAM)
    tape = Tape(record=False)
    return sample_binary(tape.constant(p_prime), rng=rng).value


def build_mask(config: RunConfig, pattern_mode: PatternMode,
               params: Optional[ParamStore] = None,
               pattern_file: Optional[PathLike] = None) -> np.ndarray:
    """The binary pattern shared by every evaluated sample."""
    d, p = config.data, config.pattern
    if pattern_mode in (PatternMode.LEARNED_TOPK, PatternMode.LEARNED_DRAW):
        if params is None or PATTERN_NAME not in params:
            raise EvaluationError(f"Pattern mode {pattern_mode.value} needs a checkpoint")
        if pattern_mode is PatternMode.LEARNED_TOPK:
            return learned_topk_mask(params, config)
        return learned_draw_mask(params, config)
    if pattern_mode is PatternMode.VD:
        return vd_pattern(d.height, d.width, p.gamma, p.vd_exponent, calib_for(config),
                          spawn_rng(config.seeds.sampling, VD_STREAM))
    if pattern_file is None:
        raise EvaluationError("Pattern mode 'file' needs a pattern file")
    return load_pattern_file(pattern_file, (d.height, d.width))


def reconstruct_sample(method: ReconMethod, sample: KSpaceSample, mask: np.ndarray,
                       config: RunConfig, params: Optional[ParamStore] = None) -> np.ndarray:
    if method is ReconMethod.ZF:
        return zero_filled(sample.kspace, sample.sens, mask)
    if method is ReconMethod.TV:
        return tv_recon(sample.kspace, sample.sens, mask, config.tv).image
    if params is None:
        raise EvaluationError("MoDL reconstruction needs a checkpoint")
    return reconstruct(sample, mask, params, unroll_config(config, evaluation=True))


def score_samples(samples: List[Tuple[str, KSpaceSample]], mask: np.ndarray, method: ReconMethod,
                  pattern_label: str, config: RunConfig,
                  params: Optional[ParamStore] = None,
                  threads: Optional[int] = None) -> List[SampleMetrics]:
    """Per-sample metrics in input order, computed on a thread pool."""
    frozen = params.snapshot() if params is not None else None

    def run(item: Tuple[str, KSpaceSample]) -> SampleMetrics:
        sample_id, sample = item
        image = reconstruct_sample(method, sample, mask, config, frozen)
        return SampleMetrics(sample_id, method.value, pattern_label,
                             psnr(image, sample.label), ssim(image, sample.label))

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        return list(pool.map(run, samples))


def metrics_csv(rows: List[SampleMetrics]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row.sample_id, row.method, row.pattern, repr(row.psnr_db), repr(row.ssim)])
    return buffer.getvalue()


def summary_dict(report: MetricReport, method: str, pattern: str, split: str,
                 config: RunConfig, checkpoint: Optional[str]) -> Dict[str, Any]:
    return {
        "method": method,
        "pattern": pattern,
        "split": split,
        "n": report.n,
        "single_sample": report.single_sample,
        "psnr_mean": report.psnr_mean,
        "psnr_std": report.psnr_std,
        "ssim_mean": report.ssim_mean,
        "ssim_std": report.ssim_std,
        "config_hash": config.config_hash(),
        "checkpoint": checkpoint,
    }


def write_reports(report: MetricReport, out_dir: PathLike, stem: str,
                  summary: Dict[str, Any]) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}.json"
    csv_path.write_text(metrics_csv(list(report.samples)))
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def evaluate(config: RunConfig, checkpoint: Union[PathLike, Checkpoint, None] = None,
             manifest_path: Optional[PathLike] = None, split: Optional[Split] = None,
             pattern_mode: Optional[PatternMode] = None, method: Optional[ReconMethod] = None,
             pattern_file: Optional[PathLike] = None, output_dir: Optional[PathLike] = None,
             threads: Optional[int] = None) -> EvaluationResult:
    """Reconstruct one split with a fixed pattern and write ``<method>_<pattern>.csv/.json``.

    Unset arguments fall back to the ``eval`` and ``train`` sections of ``config``.
    """
    split = split or Split(config.eval.split)
    pattern_mode = pattern_mode or PatternMode(config.eval.pattern_mode)
    method = method or ReconMethod(config.eval.method)
    pattern_file = pattern_file or config.eval.pattern_file

    ckpt_label = None
    params = None
    if isinstance(checkpoint, Checkpoint):
        params = checkpoint.params
    elif checkpoint is not None:
        ckpt_label = str(checkpoint)
        params = load_checkpoint(checkpoint).params
    try:
        mask = build_mask(config, pattern_mode, params, pattern_file)
    except (SamplingError, KspaceFormatError) as e:
        raise EvaluationError(f"Cannot build the {pattern_mode.value} pattern: {e}") from e

    manifest = load_manifest(manifest_path or config.train.manifest)
    if (manifest.height, manifest.width) != (config.data.height, config.data.width):
        raise EvaluationError(f"Dataset images are {manifest.height}x{manifest.width}, "
                              f"configuration expects {config.data.height}x{config.data.width}")
    samples = load_split(manifest, split)
    if not samples:
        raise EvaluationError(f"Split '{split.value}' is empty")
    logger.info("Evaluating %s with the %s pattern (sampled fraction %.4f) on %d %s samples",
                method.value, pattern_mode.value, float(mask.mean()), len(samples), split.value)

    rows = score_samples(samples, mask, method, pattern_mode.value, config, params, threads)
    report = aggregate(rows)
    logger.info("%s / %s: %s", method.value, pattern_mode.value, report)
    result = EvaluationResult(report=report, mask=mask)
    out_dir = output_dir or config.eval.output_dir
    if out_dir is not None:
        summary = summary_dict(report, method.value, pattern_mode.value, split.value, config,
                               ckpt_label)
        result.csv_path, result.json_path = write_reports(
            report, out_dir, f"{method.value}_{pattern_mode.value}", summary)
    return result
