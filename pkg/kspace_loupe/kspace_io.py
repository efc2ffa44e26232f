"""
Binary file formats.

KSD1 -- one k-space sample::

    bytes 0-3   magic b"KSD1"
    u32 x 3     N_c, H, W (little endian)
    payloads    kspace (N_c*H*W complex), sens (N_c*H*W complex), label (H*W complex)

Complex values are stored as interleaved little-endian f64 (re, im), row-major.

KST1 -- one tensor (patterns, reconstructions)::

    bytes 0-3   magic b"KST1"
    u32         dtype code: 0 = f64 real, 1 = complex (interleaved f64)
    u32         ndim
    u32 x ndim  dims
    payload     little-endian, row-major
"""

from pathlib import Path
from typing import Any, Dict, List, Tuple, Union
import json
import logging
import struct

import numpy as np
from PIL import Image

from .types import (
    CoilSensitivities, DatasetManifest, KSpaceSample, KspaceLoupeError, ManifestEntry, Split,
)

logger = logging.getLogger(__name__)

SAMPLE_MAGIC = b"KSD1"
TENSOR_MAGIC = b"KST1"
MANIFEST_FORMAT = "kspace-loupe-manifest/1"

# any single payload beyond this many elements is treated as a corrupt header
MAX_ELEMENTS = 1 << 28

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_CODES = {"f": 0, "c": 1}

PathLike = Union[str, Path]


class KspaceFormatError(KspaceLoupeError):
    """Base class for file format errors"""
    pass


class BadMagic(KspaceFormatError):
    pass


class Truncated(KspaceFormatError):
    pass


class DimensionOverflow(KspaceFormatError):
    pass


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"{self.source}: expected {n} more bytes at offset {self.pos}, "
                            f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def array(self, dtype: np.dtype, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dtype.itemsize)
        native = np.complex128 if dtype.kind == "c" else np.float64
        return np.frombuffer(raw, dtype=dtype).astype(native).reshape(shape)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise KspaceFormatError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise KspaceFormatError(f"Unable to read {path}: {e}") from e


def _check_dims(source: str, dims: Tuple[int, ...]) -> None:
    if any(d == 0 for d in dims):
        raise DimensionOverflow(f"{source}: zero-sized dimension in {dims}")
    if int(np.prod(dims, dtype=np.float64)) > MAX_ELEMENTS:
        raise DimensionOverflow(f"{source}: dimensions {dims} exceed {MAX_ELEMENTS} elements")


def _complex_bytes(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype=_DTYPES[1]).tobytes()


def write_sample(path: PathLike, sample: KSpaceSample) -> None:
    n_coils, height, width = sample.kspace.shape
    if sample.sens.maps.shape != sample.kspace.shape or sample.label.shape != (height, width):
        raise KspaceFormatError("Sample payload shapes are inconsistent")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<3I", n_coils, height, width))
        f.write(_complex_bytes(sample.kspace))
        f.write(_complex_bytes(sample.sens.maps))
        f.write(_complex_bytes(sample.label))


def read_sample(path: PathLike) -> KSpaceSample:
    reader = _Reader(_read_bytes(path), str(path))
    if reader.take(4) != SAMPLE_MAGIC:
        raise BadMagic(f"{path}: not a KSD1 sample file")
    n_coils, height, width = reader.u32(3)
    _check_dims(str(path), (n_coils, height, width))
    kspace = reader.array(_DTYPES[1], (n_coils, height, width))
    maps = reader.array(_DTYPES[1], (n_coils, height, width))
    label = reader.array(_DTYPES[1], (height, width))
    reader.finish()
    return KSpaceSample(kspace=kspace, sens=CoilSensitivities(maps), label=label)


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _CODES["c"] if np.iscomplexobj(array) else _CODES["f"]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<2I", code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_tensor(path: PathLike) -> np.ndarray:
    reader = _Reader(_read_bytes(path), str(path))
    if reader.take(4) != TENSOR_MAGIC:
        raise BadMagic(f"{path}: not a KST1 tensor file")
    code, ndim = reader.u32(2)
    if code not in _DTYPES:
        raise KspaceFormatError(f"{path}: unknown dtype code {code}")
    if ndim > 8:
        raise DimensionOverflow(f"{path}: {ndim} dimensions")
    dims = reader.u32(ndim) if ndim else ()
    _check_dims(str(path), dims)
    array = reader.array(_DTYPES[code], tuple(dims))
    reader.finish()
    return array


def write_png(path: PathLike, values: np.ndarray) -> None:
    """8-bit grayscale PNG of values in [0, 1] (x255, rounded)."""
    pixels = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as e:
        raise KspaceFormatError(f"Unable to write {path}: {e}") from e


def params_to_bytes(arrays: List[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_DTYPES[0]).tobytes() for a in arrays)


def params_from_bytes(data: bytes, shapes: List[Tuple[int, ...]], source: str) -> List[np.ndarray]:
    reader = _Reader(data, source)
    out = [reader.array(_DTYPES[0], tuple(shape)) for shape in shapes]
    reader.finish()
    return out


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    data: Dict[str, Any] = {
        "format": MANIFEST_FORMAT,
        "seed": manifest.seed,
        "height": manifest.height,
        "width": manifest.width,
        "n_coils": manifest.n_coils,
        "entries": [{"path": e.path, "split": e.split.value, "index": e.index}
                    for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_manifest(path: PathLike) -> DatasetManifest:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise KspaceFormatError(f"Unable to read manifest {path}: {e}") from e
    if not isinstance(data, dict) or data.get("format") != MANIFEST_FORMAT:
        raise KspaceFormatError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    try:
        entries = tuple(ManifestEntry(e["path"], Split(e["split"]), int(e["index"]))
                        for e in data["entries"])
        return DatasetManifest(entries=entries, seed=int(data["seed"]), height=int(data["height"]),
                               width=int(data["width"]), n_coils=int(data["n_coils"]),
                               root=str(Path(path).parent))
    except (KeyError, TypeError, ValueError) as e:
        raise KspaceFormatError(f"{path}: malformed manifest: {e}") from e
