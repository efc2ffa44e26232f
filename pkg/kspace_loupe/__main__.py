"""
Main entry point for the kspace-loupe CLI.
"""

from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import logging
import sys

import click
import yaml

from . import __version__
from .config import ConfigError, RunConfig, available_presets, load_preset
from .dataset import build_dataset
from .diagnostics import SUITES, run_suites
from .evaluation import build_mask, evaluate, reconstruct_sample
from .experiments import compare_patterns, compare_sampling, markdown_table
from .kspace_io import read_sample, write_tensor
from .metrics import error_map, psnr, save_magnitude_png, ssim
from .sampling import calibration_mask, export_pattern, vd_density
from .trainer import load_checkpoint, probability_pattern, train
from .types import PatternMode, ReconMethod, SamplingMode, Split

logger = logging.getLogger(__name__)

USAGE_EXIT = 2
ERROR_EXIT = 1


@dataclass
class CliState:
    config_file: Optional[Path] = None
    preset: Optional[str] = None
    seeds: Optional[Tuple[int, int, int]] = None
    settings: Dict[str, Any] = field(default_factory=dict)

    def load(self, fallback: Optional[RunConfig] = None,
             overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Preset, then config file, then ``--set``/``--seed``, then command flags.

        ``fallback`` (e.g. the configuration stored in a checkpoint) is used when
        neither a preset nor a config file was given.
        """
        if self.preset:
            config = load_preset(self.preset)
        else:
            config = fallback if fallback is not None and self.config_file is None else RunConfig()
        if self.config_file:
            config = RunConfig.from_file(self.config_file, base=config)
        values = dict(self.settings)
        if self.seeds:
            values.update(zip(("seeds.data", "seeds.init", "seeds.sampling"), self.seeds))
        values.update(overrides or {})
        return config.with_overrides(values) if values else config


def _parse_settings(settings: Tuple[str, ...]) -> Dict[str, Any]:
    parsed = {}
    for item in settings:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise click.BadParameter(f"expected SECTION.KEY=VALUE, got {item!r}", param_hint="--set")
        parsed[key.strip()] = yaml.safe_load(raw)
    return parsed


def handle_errors(fn):
    """Usage problems exit with 2, every other failure with 1."""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"Error: {e}", err=True)
            click.echo(click.get_current_context().get_usage(), err=True)
            sys.exit(USAGE_EXIT)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except Exception as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(ERROR_EXIT)
    return wrapper


@click.group(invoke_without_command=True)
@click.option('--config', '-c', 'config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Run configuration file (JSON or YAML)')
@click.option('--preset', '-p', type=click.Choice(sorted(available_presets())),
              help='Bundled configuration preset')
@click.option('--seed', nargs=3, type=int, default=None, metavar='DATA INIT SAMPLING',
              help='Override the three random seeds')
@click.option('--set', 'settings', multiple=True, metavar='SECTION.KEY=VALUE',
              help='Override a single configuration value')
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose output')
@click.version_option(version=__version__)
@click.pass_context
def cli(ctx: click.Context, config_file: Optional[Path], preset: Optional[str],
        seed: Optional[Tuple[int, int, int]], settings: Tuple[str, ...], verbose: bool) -> None:
    """Learn k-space sampling patterns jointly with an unrolled reconstructor."""
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(format="%(levelname)s: %(message)s", level=log_level)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit(USAGE_EXIT)
    ctx.obj = CliState(config_file, preset, seed or None, _parse_settings(settings))


@cli.command('gen-data')
@click.option('--output-dir', '-o', type=click.Path(file_okay=False, path_type=Path),
              help='Dataset directory (default: data.output_dir)')
@click.pass_obj
@handle_errors
def gen_data(state: CliState, output_dir: Optional[Path]) -> None:
    """Generate the synthetic multi-coil dataset and its manifest."""
    config = state.load()
    manifest = build_dataset(config.data, config.seeds.data, output_dir)
    click.echo(f"Wrote {len(manifest.entries)} samples and manifest.json to {manifest.root}")


@cli.command('train')
@click.option('--manifest', '-m', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--checkpoint-dir', '-o', type=click.Path(file_okay=False, path_type=Path))
@click.option('--mode', type=click.Choice([m.value for m in SamplingMode]), help='BS or AS sampling')
@click.option('--epochs', type=int)
@click.option('--lr', type=float)
@click.pass_obj
@handle_errors
def train_cmd(state: CliState, manifest: Optional[Path], checkpoint_dir: Optional[Path],
              mode: Optional[str], epochs: Optional[int], lr: Optional[float]) -> None:
    """Train pattern logits, denoiser and DC weight jointly."""
    config = state.load(overrides={"train.mode": mode, "train.epochs": epochs, "train.lr": lr})
    result = train(config, manifest, checkpoint_dir)
    score = result.best.val_psnr
    click.echo(f"Best checkpoint (epoch {result.best.epoch}"
               f"{'' if score is None else f', val PSNR {score:.2f} dB'}): {result.best_path}")


def _eval_options(fn):
    for option in reversed([
        click.option('--manifest', '-m', type=click.Path(exists=True, dir_okay=False, path_type=Path)),
        click.option('--split', type=click.Choice([s.value for s in Split])),
        click.option('--pattern', 'pattern_mode', type=click.Choice([p.value for p in PatternMode])),
        click.option('--method', type=click.Choice([m.value for m in ReconMethod])),
        click.option('--pattern-file', type=click.Path(exists=True, dir_okay=False, path_type=Path)),
    ]):
        fn = option(fn)
    return fn


@cli.command('eval')
@click.option('--checkpoint', '-k', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_eval_options
@click.option('--output-dir', '-o', type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def eval_cmd(state: CliState, checkpoint: Optional[Path], manifest: Optional[Path],
             split: Optional[str], pattern_mode: Optional[str], method: Optional[str],
             pattern_file: Optional[Path], output_dir: Optional[Path]) -> None:
    """Evaluate a split with a fixed pattern and write CSV/JSON reports."""
    ckpt = load_checkpoint(checkpoint) if checkpoint else None
    config = state.load(fallback=ckpt.config if ckpt else None, overrides={
        "eval.split": split, "eval.pattern_mode": pattern_mode, "eval.method": method,
        "eval.pattern_file": str(pattern_file) if pattern_file else None,
        "eval.output_dir": str(output_dir) if output_dir else None,
    })
    result = evaluate(config, checkpoint, manifest)
    click.echo(str(result.report))
    click.echo(f"Reports: {result.csv_path}, {result.json_path}")


@cli.command('recon')
@click.argument('sample_file', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--checkpoint', '-k', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--pattern', 'pattern_mode', type=click.Choice([p.value for p in PatternMode]))
@click.option('--method', type=click.Choice([m.value for m in ReconMethod]))
@click.option('--pattern-file', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--output', '-o', type=click.Path(dir_okay=False, path_type=Path), required=True,
              help='Reconstruction as a KST1 tensor')
@click.option('--png', type=click.Path(dir_okay=False, path_type=Path), help='Magnitude image')
@click.option('--error-png', type=click.Path(dir_okay=False, path_type=Path),
              help='5x absolute error map against the label')
@click.pass_obj
@handle_errors
def recon_cmd(state: CliState, sample_file: Path, checkpoint: Optional[Path],
              pattern_mode: Optional[str], method: Optional[str], pattern_file: Optional[Path],
              output: Path, png: Optional[Path], error_png: Optional[Path]) -> None:
    """Reconstruct a single sample file."""
    ckpt = load_checkpoint(checkpoint) if checkpoint else None
    config = state.load(fallback=ckpt.config if ckpt else None,
                        overrides={"eval.pattern_mode": pattern_mode, "eval.method": method})
    sample = read_sample(sample_file)
    params = ckpt.params if ckpt else None
    mask = build_mask(config, PatternMode(config.eval.pattern_mode), params,
                      pattern_file or config.eval.pattern_file)
    image = reconstruct_sample(ReconMethod(config.eval.method), sample, mask, config, params)
    write_tensor(output, image)
    if png:
        save_magnitude_png(image, png, vmax=float(abs(sample.label).max()))
    if error_png:
        save_magnitude_png(error_map(image, sample.label), error_png, vmax=1.0)
    click.echo(f"PSNR {psnr(image, sample.label):.2f} dB, SSIM {ssim(image, sample.label):.4f}"
               f" -> {output}")


@cli.command('export-pattern')
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--out-dir', '-o', type=click.Path(file_okay=False, path_type=Path), default=Path("patterns"),
              show_default=True)
@click.option('--draw', is_flag=True, help='Export one binary draw instead of the top-gamma mask')
@click.pass_obj
@handle_errors
def export_pattern_cmd(state: CliState, checkpoint: Path, out_dir: Path, draw: bool) -> None:
    """Write the learned pattern of a checkpoint as PNG and KST1 files."""
    ckpt = load_checkpoint(checkpoint)
    config = state.load(fallback=ckpt.config)
    mode = PatternMode.LEARNED_DRAW if draw else PatternMode.LEARNED_TOPK
    mask = build_mask(config, mode, ckpt.params)
    paths = export_pattern(mask, probability_pattern(ckpt.params, config), out_dir, prefix="learned")
    click.echo(f"Sampled fraction {mask.mean():.4f}; wrote {', '.join(str(p) for p in paths.values())}")


@cli.command('vd-pattern')
@click.option('--height', type=int)
@click.option('--width', type=int)
@click.option('--gamma', type=float)
@click.option('--exponent', type=float)
@click.option('--out-dir', '-o', type=click.Path(file_okay=False, path_type=Path), default=Path("patterns"),
              show_default=True)
@click.pass_obj
@handle_errors
def vd_pattern_cmd(state: CliState, height: Optional[int], width: Optional[int],
                   gamma: Optional[float], exponent: Optional[float], out_dir: Path) -> None:
    """Write a polynomial variable-density pattern."""
    config = state.load(overrides={"data.height": height, "data.width": width,
                                   "pattern.gamma": gamma, "pattern.vd_exponent": exponent})
    d, p = config.data, config.pattern
    mask = build_mask(config, PatternMode.VD)
    density = vd_density(d.height, d.width, p.gamma, p.vd_exponent,
                         calibration_mask(d.height, d.width, p.calib_size))
    paths = export_pattern(mask, density, out_dir, prefix="vd")
    click.echo(f"Sampled fraction {mask.mean():.4f}; wrote {', '.join(str(p) for p in paths.values())}")


@cli.command('gradcheck')
@click.option('--suite', 'suites', multiple=True, type=click.Choice(sorted(SUITES)),
              help='Run only these suites (default: all)')
@click.option('--seed', type=int, default=0, show_default=True)
@handle_errors
def gradcheck_cmd(suites: Tuple[str, ...], seed: int) -> None:
    """Compare analytic gradients with central differences."""
    results = run_suites(list(suites) or None, seed)
    for result in results:
        status = "ok" if result.passed else "FAILED"
        click.echo(f"{result.name:10s} max rel err {result.max_error:.3e} "
                   f"(< {result.threshold:.0e}) {status}")
    if not all(r.passed for r in results):
        sys.exit(ERROR_EXIT)


@cli.command('compare-sampling')
@click.option('--manifest', '-m', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--out-dir', '-o', type=click.Path(file_okay=False, path_type=Path),
              default=Path("experiments/sampling"), show_default=True)
@click.pass_obj
@handle_errors
def compare_sampling_cmd(state: CliState, manifest: Optional[Path], out_dir: Path) -> None:
    """Train BS and AS variants and compare them with binary test patterns."""
    rows = compare_sampling(state.load(), manifest, out_dir)
    click.echo(markdown_table(rows), nl=False)


@cli.command('compare-patterns')
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--manifest', '-m', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--out-dir', '-o', type=click.Path(file_okay=False, path_type=Path),
              default=Path("experiments/patterns"), show_default=True)
@click.pass_obj
@handle_errors
def compare_patterns_cmd(state: CliState, checkpoint: Path, manifest: Optional[Path],
                         out_dir: Path) -> None:
    """Compare the learned pattern with variable density under every method."""
    ckpt = load_checkpoint(checkpoint)
    rows = compare_patterns(state.load(fallback=ckpt.config), ckpt, manifest, out_dir)
    click.echo(markdown_table(rows), nl=False)


if __name__ == '__main__':
    cli()
