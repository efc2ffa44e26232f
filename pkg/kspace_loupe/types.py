from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np


class KspaceLoupeError(Exception):
    """Base class for every error raised by the package"""
    pass


class SamplingMode(Enum):
    BS = "BS"  # binary sampling + straight-through estimator
    AS = "AS"  # approximate (sigmoid-relaxed) sampling


class PatternMode(Enum):
    LEARNED_TOPK = "learned-topk"
    LEARNED_DRAW = "learned-draw"
    VD = "vd"
    FILE = "file"


class ReconMethod(Enum):
    MODL = "modl"
    TV = "tv"
    ZF = "zf"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class CoilSensitivities:
    """Complex sensitivity maps S_j, shape (N_c, H, W)."""
    maps: np.ndarray

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True, eq=False)
class KSpaceSample:
    """Fully sampled multi-coil k-space with its maps and coil-combined label."""
    kspace: np.ndarray
    sens: CoilSensitivities
    label: np.ndarray

    @property
    def n_coils(self) -> int:
        return self.kspace.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.label.shape

    def identical_to(self, other: "KSpaceSample") -> bool:
        """Bit-exact comparison of every payload."""
        return (
            self.kspace.shape == other.kspace.shape
            and self.kspace.tobytes() == other.kspace.tobytes()
            and self.sens.maps.tobytes() == other.sens.maps.tobytes()
            and self.label.tobytes() == other.label.tobytes()
        )


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest file
    split: Split
    index: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    seed: int
    height: int
    width: int
    n_coils: int
    root: str = "."

    def split(self, split: Split) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


@dataclass(frozen=True)
class SampleMetrics:
    sample_id: str
    method: str
    pattern: str
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class MetricReport:
    psnr_values: Tuple[float, ...]
    ssim_values: Tuple[float, ...]
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n: int
    single_sample: bool = False  # std reported as 0 when n == 1
    samples: Tuple[SampleMetrics, ...] = field(default_factory=tuple)

    def __str__(self) -> str:
        return (f"PSNR {self.psnr_mean:.2f} ± {self.psnr_std:.2f} dB, "
                f"SSIM {self.ssim_mean:.4f} ± {self.ssim_std:.4f} (n={self.n})")
