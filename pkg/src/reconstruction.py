#!/usr/bin/env python3
"""
MSVL Toolkit — Multispectral Reconstruction (RGB image -> 24-band cube, spectral views)
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from calibration import TransformationMatrix, apply_matrix
from spectral import BAND_COUNT, SpectralCube
from utils.errors import ArtifactIOError, FormatError, RejectedInputError
from utils.io import write_json

logger = logging.getLogger(__name__)

# rows per tile for threaded reconstruction
TILE_ROWS = 16


@dataclass(frozen=True)
class LinearRgbImage:
    """Row-major (height, width, 3) linear-light values in [0, 1]."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise RejectedInputError(f"Image must be non-empty, got {self.width}x{self.height}")
        if data.size != 3 * self.width * self.height:
            raise RejectedInputError(
                f"Image data has {data.size} values, expected {3 * self.width * self.height}"
            )
        data = data.reshape(self.height, self.width, 3)
        bad = np.argwhere(~np.isfinite(data))
        if bad.size:
            y, x, _ = bad[0]
            raise RejectedInputError(f"Non-finite pixel at (x={x}, y={y})")
        bad = np.argwhere((data < 0.0) | (data > 1.0))
        if bad.size:
            y, x, _ = bad[0]
            raise RejectedInputError(f"Pixel outside [0, 1] at (x={x}, y={y})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class ReconstructionMeta:
    clamped_fraction: float
    matrix_id: str
    srgb_decoded: bool


def srgb_decode(image8: np.ndarray) -> LinearRgbImage:
    """Standard sRGB transfer from 8-bit code values to linear light."""
    image8 = np.asarray(image8)
    if image8.ndim != 3 or image8.shape[2] != 3:
        raise RejectedInputError(f"Expected an (H, W, 3) image, got shape {image8.shape}")
    if image8.min(initial=0) < 0 or image8.max(initial=0) > 255:
        raise RejectedInputError("8-bit channel values must be in 0..255")
    v = image8.astype(np.float64) / 255.0
    linear = np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    return LinearRgbImage(width=image8.shape[1], height=image8.shape[0], data=linear)


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Inverse of `srgb_decode`: linear [0, 1] -> 8-bit code values."""
    v = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    encoded = np.where(v <= 0.0031308, v * 12.92, 1.055 * np.power(v, 1.0 / 2.4) - 0.055)
    return np.clip(np.rint(encoded * 255.0), 0, 255).astype(np.uint8)


def load_image(path: Union[str, os.PathLike], decode_srgb: bool = True) -> LinearRgbImage:
    """Load an 8-bit PNG or PPM image."""
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise FormatError(f"{path}: unsupported image format {img.format} (PNG or PPM only)")
            raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise FormatError(f"{path}: not an image ({e})") from e
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    if decode_srgb:
        return srgb_decode(raw)
    return LinearRgbImage(width=raw.shape[1], height=raw.shape[0], data=raw.astype(np.float64) / 255.0)


def save_image(path: Union[str, os.PathLike], image8: np.ndarray) -> None:
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        Image.fromarray(np.asarray(image8, dtype=np.uint8)).save(path, format="PNG")
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def _reconstruct_rows(m: TransformationMatrix, img: LinearRgbImage, y0: int, y1: int) -> Tuple[np.ndarray, int]:
    pixels = img.data[y0:y1].reshape(-1, 3)
    raw = apply_matrix(m, pixels)
    outside = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    tile = np.clip(raw, 0.0, 1.0).astype(np.float32)
    return tile.T.reshape(BAND_COUNT, y1 - y0, img.width), outside


def reconstruct_cube(
    m: TransformationMatrix,
    img: LinearRgbImage,
    threads: int = 1,
    srgb_decoded: bool = False,
) -> Tuple[SpectralCube, ReconstructionMeta]:
    """Per-pixel clamp01(M . augment(rgb)); rows are processed in independent tiles."""
    data = np.empty((BAND_COUNT, img.height, img.width), dtype=np.float32)
    ranges = [(y, min(y + TILE_ROWS, img.height)) for y in range(0, img.height, TILE_ROWS)]

    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tiles = list(pool.map(lambda r: _reconstruct_rows(m, img, *r), ranges))
    else:
        tiles = [_reconstruct_rows(m, img, *r) for r in ranges]

    outside = 0
    for (y0, y1), (tile, count) in zip(ranges, tiles):
        data[:, y0:y1, :] = tile
        outside += count

    fraction = outside / float(img.width * img.height * BAND_COUNT)
    if fraction > 0:
        logger.warning("Clamped %.4f%% of reconstructed values to [0, 1]", 100.0 * fraction)
    cube = SpectralCube(width=img.width, height=img.height, data=data)
    meta = ReconstructionMeta(clamped_fraction=fraction, matrix_id=m.checksum(), srgb_decoded=srgb_decoded)
    return cube, meta


def extract_view(cube: SpectralCube, band_index: int) -> np.ndarray:
    """Copy of one band plane, (height, width) float32."""
    if not isinstance(band_index, (int, np.integer)) or not 0 <= band_index < cube.bands:
        raise RejectedInputError(f"Band index must be in 0..{cube.bands - 1}, got {band_index}")
    return np.array(cube.data[band_index], copy=True)


def assemble_views(views: Sequence[np.ndarray]) -> SpectralCube:
    if len(views) != BAND_COUNT:
        raise RejectedInputError(f"Need {BAND_COUNT} views, got {len(views)}")
    shapes = {np.shape(v) for v in views}
    if len(shapes) != 1:
        raise RejectedInputError(f"Views differ in shape: {sorted(shapes)}")
    data = np.stack([np.asarray(v, dtype=np.float32) for v in views])
    return SpectralCube(width=data.shape[2], height=data.shape[1], data=data)


def write_meta(path: Union[str, os.PathLike], meta: ReconstructionMeta) -> None:
    write_json(path, asdict(meta))


def views_tensor(cubes: List[SpectralCube]) -> np.ndarray:
    """Stack cubes into a (batch, 24, H, W) float64 array for the model."""
    return np.stack([c.data for c in cubes]).astype(np.float64)
