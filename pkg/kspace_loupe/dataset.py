"""
Synthetic dataset generation and manifest handling.
"""

from pathlib import Path
from typing import Iterator, List, Tuple, Union
import logging

from .config import DataConfig
from .kspace_io import KspaceFormatError, read_manifest, read_sample, write_manifest, write_sample
from .mri_model import simulate_sample
from .numerics import spawn_rng
from .types import DatasetManifest, KSpaceSample, KspaceLoupeError, ManifestEntry, Split

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class DatasetError(KspaceLoupeError):
    """Raised for inconsistent manifests or unreadable samples"""
    pass


def build_dataset(config: DataConfig, seed: int,
                  output_dir: Union[str, Path, None] = None) -> DatasetManifest:
    """Generate phantom + coil samples for every split and write them with a manifest.

    Sample ``i`` (counted across splits in train/val/test order) uses the
    sub-stream ``spawn_rng(seed, i)``, so the files only depend on the seed and
    their position.
    """
    root = Path(output_dir if output_dir is not None else config.output_dir)
    counts = [(Split.TRAIN, config.n_train), (Split.VAL, config.n_val), (Split.TEST, config.n_test)]
    logger.info("Generating %d samples (%dx%d, %d coils) into %s",
                sum(c for _, c in counts), config.height, config.width, config.n_coils, root)

    entries: List[ManifestEntry] = []
    index = 0
    for split, count in counts:
        for i in range(count):
            rel_path = f"{split.value}/sample_{i:04d}.ksd"
            rng = spawn_rng(seed, index)
            sample = simulate_sample(rng, config.height, config.width, config.n_coils,
                                     noise_std=config.noise_std)
            try:
                write_sample(root / rel_path, sample)
            except OSError as e:
                raise DatasetError(f"Failed to write {root / rel_path}: {e}") from e
            logger.debug("Wrote %s", rel_path)
            entries.append(ManifestEntry(rel_path, split, index))
            index += 1

    manifest = DatasetManifest(entries=tuple(entries), seed=seed, height=config.height,
                               width=config.width, n_coils=config.n_coils, root=str(root))
    try:
        write_manifest(root / MANIFEST_NAME, manifest)
    except OSError as e:
        raise DatasetError(f"Failed to write manifest into {root}: {e}") from e
    return manifest


def load_manifest(path: Union[str, Path], verify: bool = False) -> DatasetManifest:
    """Read a manifest and check that splits are disjoint and files exist.

    With ``verify`` every sample is parsed and its dimensions compared with the
    manifest header.
    """
    try:
        manifest = read_manifest(path)
    except KspaceFormatError as e:
        raise DatasetError(str(e)) from e
    seen = set()
    for entry in manifest.entries:
        if entry.path in seen:
            raise DatasetError(f"{entry.path} is listed more than once")
        seen.add(entry.path)
        full = Path(manifest.root) / entry.path
        if not full.is_file():
            raise DatasetError(f"Missing sample file: {full}")
        if verify:
            sample = _read(full)
            expected = (manifest.n_coils, manifest.height, manifest.width)
            if sample.kspace.shape != expected:
                raise DatasetError(f"{full}: shape {sample.kspace.shape}, manifest says {expected}")
    logger.debug("Manifest %s: %d entries", path, len(manifest.entries))
    return manifest


def _read(path: Path) -> KSpaceSample:
    try:
        return read_sample(path)
    except KspaceFormatError as e:
        raise DatasetError(f"Cannot parse {path}: {e}") from e


def iter_split(manifest: DatasetManifest, split: Split) -> Iterator[Tuple[str, KSpaceSample]]:
    """Yield ``(sample_id, sample)`` in index order."""
    for entry in sorted(manifest.split(split), key=lambda e: e.index):
        yield Path(entry.path).with_suffix("").as_posix(), _read(Path(manifest.root) / entry.path)


def load_split(manifest: DatasetManifest, split: Split) -> List[Tuple[str, KSpaceSample]]:
    return list(iter_split(manifest, split))
