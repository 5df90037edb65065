#!/usr/bin/env python3
"""
MSVL Toolkit — Spectral Core (fixed wavelength grid, spectra, cubes, `.msc` files)
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from utils.errors import CorruptionError, FormatError, RejectedInputError
from utils.io import PathOrStream, open_binary

logger = logging.getLogger(__name__)

BAND_COUNT = 24
START_NM = 450.0
STEP_NM = 10.0
WAVELENGTHS_NM: Tuple[float, ...] = tuple(START_NM + STEP_NM * k for k in range(BAND_COUNT))

CUBE_MAGIC = b"MSCUBE01"
CUBE_DTYPE = "f32le"
CUBE_LAYOUT = "bsq"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpectrumGrid:
    """The 24-point 450–680 nm grid. Any other grid is rejected on construction."""

    wavelengths_nm: Tuple[float, ...] = WAVELENGTHS_NM

    def __post_init__(self):
        values = tuple(float(v) for v in self.wavelengths_nm)
        if values != WAVELENGTHS_NM:
            raise RejectedInputError(
                f"Unsupported wavelength grid (expected {BAND_COUNT} bands 450..680 nm step 10): {values}"
            )
        object.__setattr__(self, "wavelengths_nm", values)

    def __len__(self) -> int:
        return len(self.wavelengths_nm)

    def index_of(self, nm: float) -> int:
        """Band index for a wavelength on the grid."""
        k = (float(nm) - START_NM) / STEP_NM
        if not float(k).is_integer() or not 0 <= k < BAND_COUNT:
            raise RejectedInputError(f"{nm} nm is not on the 450..680 nm grid")
        return int(k)

    def window(self, lo_nm: float, hi_nm: float) -> np.ndarray:
        """Boolean band mask for lo_nm <= wavelength <= hi_nm."""
        wl = np.asarray(self.wavelengths_nm)
        return (wl >= lo_nm) & (wl <= hi_nm)


GRID = SpectrumGrid()


def _check_grid(a: SpectrumGrid, b: SpectrumGrid) -> None:
    if a != b:
        raise RejectedInputError("Spectra are on different wavelength grids")


@dataclass(frozen=True)
class ReflectanceSpectrum:
    values: np.ndarray
    grid: SpectrumGrid = GRID

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != len(self.grid):
            raise RejectedInputError(
                f"Spectrum has {values.shape[0]} values, grid has {len(self.grid)}"
            )
        if not np.all(np.isfinite(values)):
            raise RejectedInputError("Spectrum contains non-finite values")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def clamped(cls, values: Sequence[float], grid: SpectrumGrid = GRID) -> "ReflectanceSpectrum":
        return cls(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0), grid)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReflectanceSpectrum):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SpectralCube:
    """Band-major (bands, height, width) float32 reflectance in [0, 1]."""

    width: int
    height: int
    data: np.ndarray
    grid: SpectrumGrid = GRID
    bands: int = field(default=BAND_COUNT)

    def __post_init__(self):
        if self.bands != BAND_COUNT:
            raise RejectedInputError(f"Cube must have {BAND_COUNT} bands, got {self.bands}")
        if self.width < 1 or self.height < 1:
            raise RejectedInputError(f"Cube dimensions must be positive, got {self.width}x{self.height}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        expected = (self.bands, self.height, self.width)
        if data.size != self.bands * self.height * self.width:
            raise RejectedInputError(f"Cube data has {data.size} values, expected {expected}")
        data = data.reshape(expected)
        if not np.all(np.isfinite(data)):
            raise RejectedInputError("Cube contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise RejectedInputError("Cube values must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(data))

    def band(self, k: int) -> np.ndarray:
        return self.data[k]

    def band_means(self) -> np.ndarray:
        return self.data.astype(np.float64).mean(axis=(1, 2))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.grid == other.grid
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def rmse(a: ReflectanceSpectrum, b: ReflectanceSpectrum) -> float:
    """Root mean square difference over the 24 bands."""
    _check_grid(a.grid, b.grid)
    diff = a.values - b.values
    return float(np.sqrt(np.mean(diff * diff)))


def _cube_header(cube: SpectralCube) -> bytes:
    header = {
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "wavelengths_nm": list(cube.grid.wavelengths_nm),
        "dtype": CUBE_DTYPE,
        "layout": CUBE_LAYOUT,
    }
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def write_cube(cube: SpectralCube, destination: PathOrStream) -> int:
    """Write `cube` as `.msc`; returns the number of bytes written."""
    header = _cube_header(cube)
    payload = cube.data.astype("<f4", copy=False).tobytes(order="C")
    blob = CUBE_MAGIC + struct.pack("<I", len(header)) + header + payload
    with open_binary(destination, "wb") as fh:
        fh.write(blob)
    logger.debug("Wrote cube %dx%dx%d (%d bytes)", cube.width, cube.height, cube.bands, len(blob))
    return len(blob)


def read_cube(source: PathOrStream) -> SpectralCube:
    with open_binary(source, "rb") as fh:
        blob = fh.read()

    if len(blob) < len(CUBE_MAGIC) + 4 or blob[: len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise FormatError(f"Not a spectral cube: bad magic {blob[:len(CUBE_MAGIC)]!r}")
    (header_len,) = struct.unpack_from("<I", blob, len(CUBE_MAGIC))
    start = len(CUBE_MAGIC) + 4
    if start + header_len > len(blob):
        raise CorruptionError("Cube header runs past the end of the file")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
        width, height, bands = int(header["width"]), int(header["height"]), int(header["bands"])
        wavelengths = tuple(float(v) for v in header["wavelengths_nm"])
        dtype, layout = header["dtype"], header["layout"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed cube header: {e}") from e

    if dtype != CUBE_DTYPE or layout != CUBE_LAYOUT:
        raise FormatError(f"Unsupported cube encoding dtype={dtype!r} layout={layout!r}")
    if bands != BAND_COUNT or wavelengths != WAVELENGTHS_NM:
        raise CorruptionError(f"Cube header declares {bands} bands / {len(wavelengths)} wavelengths")
    if width < 1 or height < 1:
        raise CorruptionError(f"Cube header declares invalid size {width}x{height}")

    payload = blob[start + header_len :]
    expected = 4 * width * height * bands
    if len(payload) != expected:
        raise CorruptionError(f"Cube payload is {len(payload)} bytes, header implies {expected}")

    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(bands, height, width)
    if not np.all(np.isfinite(data)):
        raise CorruptionError("Cube payload contains non-finite values")
    if data.min() < 0.0 or data.max() > 1.0:
        raise CorruptionError("Cube payload contains values outside [0, 1]")
    return SpectralCube(width=width, height=height, data=data)
