"""
Comparison experiments built on the trainer and the evaluation harness.

``compare_sampling`` trains the binary (straight-through) and the relaxed
variant with identical seeds and scores both with binary test patterns.
``compare_patterns`` scores one checkpoint's learned top-gamma pattern against a
variable-density pattern under every reconstruction method.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import json
import logging

from .config import RunConfig
from .evaluation import evaluate
from .trainer import Checkpoint, load_checkpoint, train
from .types import MetricReport, PatternMode, ReconMethod, SamplingMode

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    method: str
    pattern: str
    report: MetricReport

    def to_dict(self) -> Dict[str, object]:
        return {
            "label": self.label,
            "method": self.method,
            "pattern": self.pattern,
            "n": self.report.n,
            "psnr_mean": self.report.psnr_mean,
            "psnr_std": self.report.psnr_std,
            "ssim_mean": self.report.ssim_mean,
            "ssim_std": self.report.ssim_std,
        }


def markdown_table(rows: Sequence[ComparisonRow]) -> str:
    lines = ["| Setting | Method | Pattern | PSNR (dB) | SSIM |",
             "|---|---|---|---|---|"]
    for row in rows:
        r = row.report
        lines.append(f"| {row.label} | {row.method} | {row.pattern} | "
                     f"{r.psnr_mean:.2f} ± {r.psnr_std:.2f} | {r.ssim_mean:.4f} ± {r.ssim_std:.4f} |")
    return "\n".join(lines) + "\n"


def write_comparison(rows: Sequence[ComparisonRow], out_dir: PathLike, stem: str,
                     config: RunConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config.config_hash(), "rows": [row.to_dict() for row in rows]}
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    table = out / f"{stem}.md"
    table.write_text(markdown_table(rows))
    logger.info("Wrote %s", table)
    return table


def _binary_pattern_mode(config: RunConfig) -> PatternMode:
    mode = PatternMode(config.eval.pattern_mode)
    if mode not in (PatternMode.LEARNED_TOPK, PatternMode.LEARNED_DRAW):
        logger.warning("Pattern mode %s has no learned pattern; using learned-topk", mode.value)
        return PatternMode.LEARNED_TOPK
    return mode


def compare_sampling(config: RunConfig, manifest_path: Optional[PathLike] = None,
                     out_dir: PathLike = "experiments/sampling") -> List[ComparisonRow]:
    """Train BS and AS from the same seeds; MoDL of each plus zero-filled on the BS pattern."""
    out = Path(out_dir)
    pattern_mode = _binary_pattern_mode(config)
    checkpoints: Dict[SamplingMode, Checkpoint] = {}
    for mode in SamplingMode:
        variant = config.with_overrides({"train.mode": mode.value})
        logger.info("Training the %s variant", mode.value)
        checkpoints[mode] = train(variant, manifest_path, out / mode.value.lower()).best

    rows = []
    reports_dir = out / "reports"
    for mode in SamplingMode:
        ckpt = checkpoints[mode]
        result = evaluate(ckpt.config, ckpt, manifest_path, pattern_mode=pattern_mode,
                          method=ReconMethod.MODL, output_dir=reports_dir / mode.value.lower())
        rows.append(ComparisonRow(f"MoDL+{mode.value}", ReconMethod.MODL.value, pattern_mode.value,
                                  result.report))
    bs = checkpoints[SamplingMode.BS]
    result = evaluate(bs.config, bs, manifest_path, pattern_mode=pattern_mode,
                      method=ReconMethod.ZF, output_dir=reports_dir / "zf")
    rows.append(ComparisonRow("zero-filled", ReconMethod.ZF.value, pattern_mode.value, result.report))
    write_comparison(rows, out, "compare_sampling", config)
    return rows


def compare_patterns(config: RunConfig, checkpoint: Union[PathLike, Checkpoint],
                     manifest_path: Optional[PathLike] = None,
                     out_dir: PathLike = "experiments/patterns",
                     methods: Sequence[ReconMethod] = (ReconMethod.MODL, ReconMethod.TV, ReconMethod.ZF),
                     ) -> List[ComparisonRow]:
    """Learned top-gamma vs variable density, one row per (method, pattern)."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    out = Path(out_dir)
    rows = []
    for method in methods:
        for pattern_mode in (PatternMode.LEARNED_TOPK, PatternMode.VD):
            result = evaluate(config, ckpt, manifest_path, pattern_mode=pattern_mode, method=method,
                              output_dir=out / "reports")
            label = "learned" if pattern_mode is PatternMode.LEARNED_TOPK else "VD"
            rows.append(ComparisonRow(label, method.value, pattern_mode.value, result.report))
    write_comparison(rows, out, "compare_patterns", config)
    return rows
