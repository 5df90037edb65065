#!/usr/bin/env python3
"""
MSVL Toolkit — Camera Calibration (Wiener estimation of the RGB -> 24-band map)
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from spectral import BAND_COUNT, GRID, ReflectanceSpectrum, SpectrumGrid, rmse
from utils.errors import ArtifactIOError, DegenerateInputError, FormatError, RejectedInputError
from utils.io import read_json, sha256_hex, write_json

logger = logging.getLogger(__name__)

MATRIX_VERSION = 1
RGB_COLUMNS = ["r", "g", "b"]
REFLECTANCE_COLUMNS = [f"R{int(nm)}" for nm in GRID.wavelengths_nm]
PATCH_COLUMNS = ["id"] + RGB_COLUMNS + REFLECTANCE_COLUMNS


@dataclass(frozen=True)
class ColorPatch:
    id: str
    rgb_linear: np.ndarray
    reference: ReflectanceSpectrum

    def __post_init__(self):
        rgb = np.array(self.rgb_linear, dtype=np.float64).reshape(-1)
        if rgb.shape != (3,):
            raise RejectedInputError(f"Patch {self.id}: rgb must have 3 components, got {rgb.shape}")
        if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
            raise RejectedInputError(f"Patch {self.id}: rgb must be finite and in [0, 1], got {rgb}")
        rgb.setflags(write=False)
        object.__setattr__(self, "rgb_linear", rgb)


@dataclass(frozen=True)
class TransformationMatrix:
    rows: np.ndarray
    bias: bool = False
    lam: float = 0.0
    training_rmse: float = 0.0
    grid: SpectrumGrid = GRID

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        cols = 3 + (1 if self.bias else 0)
        if rows.shape != (BAND_COUNT, cols):
            raise RejectedInputError(f"Matrix must be {BAND_COUNT}x{cols}, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise RejectedInputError("Matrix contains non-finite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def cols(self) -> int:
        return self.rows.shape[1]

    def checksum(self) -> str:
        tag = b"bias" if self.bias else b"nobias"
        return sha256_hex(tag + self.rows.astype("<f8").tobytes())[:16]


@dataclass(frozen=True)
class CalibrationReport:
    per_patch_rmse: Tuple[Tuple[str, float], ...]
    mean_rmse: float
    max_rmse: float
    training_ids: FrozenSet[str] = field(default_factory=frozenset)

    def membership(self, patch_id: str) -> str:
        return "train" if patch_id in self.training_ids else "holdout"


def augment(rgb: np.ndarray, bias: bool) -> np.ndarray:
    """Append the constant 1 column when the bias term is enabled."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if not bias:
        return rgb
    ones = np.ones(rgb.shape[:-1] + (1,), dtype=np.float64)
    return np.concatenate([rgb, ones], axis=-1)


def apply_matrix(m: TransformationMatrix, pixels: np.ndarray) -> np.ndarray:
    """Pre-clamp reconstruction of an (n, 3) pixel block -> (n, 24).

    Accumulates one input column at a time so each output element is computed
    in the same order no matter how the pixels are partitioned.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    out = pixels[:, 0:1] * m.rows[:, 0]
    for j in range(1, 3):
        out = out + pixels[:, j : j + 1] * m.rows[:, j]
    if m.bias:
        out = out + m.rows[:, 3]
    return out


def default_lambda(r_cc: np.ndarray) -> float:
    return 1e-6 * float(np.trace(r_cc)) / r_cc.shape[0]


def _canonical_order(patches: Sequence[ColorPatch]) -> List[ColorPatch]:
    return sorted(
        patches,
        key=lambda p: (tuple(p.rgb_linear.tolist()), tuple(p.reference.values.tolist()), p.id),
    )


def wiener_fit(train: Sequence[ColorPatch], lam: Optional[float] = None, bias: bool = False) -> TransformationMatrix:
    """Fit M = R_rc (R_cc + lam I)^-1 from training patches.

    `lam=None` selects 1e-6 * trace(R_cc) / cols.
    """
    minimum = 4 if bias else 3
    if len(train) < minimum:
        raise RejectedInputError(f"Need at least {minimum} patches (bias={bias}), got {len(train)}")
    if lam is not None and (not np.isfinite(lam) or lam < 0):
        raise RejectedInputError(f"lambda must be finite and >= 0, got {lam}")

    cols = 3 + (1 if bias else 0)
    r_rc = np.zeros((BAND_COUNT, cols), dtype=np.float64)
    r_cc = np.zeros((cols, cols), dtype=np.float64)
    # sorted input + explicit loop: the sums do not depend on patch order
    for patch in _canonical_order(train):
        c = augment(patch.rgb_linear, bias)
        r_rc += np.outer(patch.reference.values, c)
        r_cc += np.outer(c, c)

    if lam is None:
        lam = default_lambda(r_cc)
    system = r_cc + lam * np.eye(cols)
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond * np.finfo(np.float64).eps >= 1.0:
        raise DegenerateInputError(
            f"Patch correlation matrix is singular (cond={cond:.3g}); retry with a larger lambda"
        )
    try:
        rows = np.linalg.solve(system.T, r_rc.T).T
    except np.linalg.LinAlgError as e:
        raise DegenerateInputError(f"Wiener system could not be solved ({e}); retry with a larger lambda") from e

    fitted = TransformationMatrix(rows=rows, bias=bias, lam=float(lam))
    errors = [rmse(reconstruct_spectrum(fitted, p.rgb_linear), p.reference) for p in train]
    fitted = TransformationMatrix(rows=rows, bias=bias, lam=float(lam), training_rmse=float(np.mean(errors)))
    logger.info(
        "Wiener fit on %d patches (bias=%s, lambda=%.3g): training RMSE %.6f",
        len(train), bias, lam, fitted.training_rmse,
    )
    return fitted


def reconstruct_spectrum(m: TransformationMatrix, rgb: Sequence[float]) -> ReflectanceSpectrum:
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1)
    if rgb.shape != (3,):
        raise RejectedInputError(f"rgb must have 3 components, got {rgb.shape}")
    if not np.all(np.isfinite(rgb)):
        raise RejectedInputError(f"rgb must be finite, got {rgb}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise RejectedInputError(f"rgb must be in [0, 1], got {rgb}")
    return ReflectanceSpectrum.clamped(apply_matrix(m, rgb[None, :])[0], m.grid)


def validate_calibration(
    m: TransformationMatrix,
    holdout: Sequence[ColorPatch],
    training_ids: Optional[Sequence[str]] = None,
) -> CalibrationReport:
    if not holdout:
        raise RejectedInputError("Validation needs at least one patch")
    per_patch = tuple((p.id, rmse(reconstruct_spectrum(m, p.rgb_linear), p.reference)) for p in holdout)
    values = np.array([v for _, v in per_patch])
    report = CalibrationReport(
        per_patch_rmse=per_patch,
        mean_rmse=float(np.mean(values)),
        max_rmse=float(np.max(values)),
        training_ids=frozenset(training_ids or ()),
    )
    logger.info("Validated on %d patches: mean RMSE %.4f, max %.4f", len(holdout), report.mean_rmse, report.max_rmse)
    return report


# -------------------------------
# Files
# -------------------------------
def load_patches_csv(path: Union[str, os.PathLike]) -> List[ColorPatch]:
    """Read `id,r,g,b,R450,...,R680`."""
    try:
        df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: unreadable patch CSV ({e})") from e
    if list(df.columns) != PATCH_COLUMNS:
        raise FormatError(f"{path}: patch CSV header must be {','.join(PATCH_COLUMNS)}")

    patches = []
    for i, row in enumerate(df.itertuples(index=False), start=1):
        try:
            values = np.asarray(row[1:], dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: row {i}: non-numeric value ({e})") from e
        try:
            reference = ReflectanceSpectrum(values[3:])
            if reference.values.min() < 0.0 or reference.values.max() > 1.0:
                raise RejectedInputError("reflectance outside [0, 1]")
            patches.append(ColorPatch(id=str(row[0]), rgb_linear=values[:3], reference=reference))
        except RejectedInputError as e:
            raise RejectedInputError(f"{path}: row {i}: {e}") from e
    return patches


def write_patches_csv(path: Union[str, os.PathLike], patches: Sequence[ColorPatch]) -> None:
    records = [[p.id, *p.rgb_linear.tolist(), *p.reference.values.tolist()] for p in patches]
    df = pd.DataFrame(records, columns=PATCH_COLUMNS)
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def matrix_to_json(m: TransformationMatrix) -> dict:
    return {
        "version": MATRIX_VERSION,
        "bias": m.bias,
        "lambda": m.lam,
        "wavelengths_nm": list(m.grid.wavelengths_nm),
        "rows": m.rows.tolist(),
        "training_rmse": m.training_rmse,
    }


def matrix_from_json(payload: dict) -> TransformationMatrix:
    try:
        if payload["version"] != MATRIX_VERSION:
            raise FormatError(f"Unsupported matrix version {payload['version']}")
        SpectrumGrid(tuple(payload["wavelengths_nm"]))
        return TransformationMatrix(
            rows=np.asarray(payload["rows"], dtype=np.float64),
            bias=bool(payload["bias"]),
            lam=float(payload["lambda"]),
            training_rmse=float(payload["training_rmse"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed matrix JSON: {e}") from e


def save_matrix(path: Union[str, os.PathLike], m: TransformationMatrix) -> None:
    write_json(path, matrix_to_json(m))


def load_matrix(path: Union[str, os.PathLike]) -> TransformationMatrix:
    return matrix_from_json(read_json(path))


def write_report_csv(path: Union[str, os.PathLike], report: CalibrationReport) -> None:
    df = pd.DataFrame(
        [(pid, value, report.membership(pid)) for pid, value in report.per_patch_rmse],
        columns=["id", "rmse", "set"],
    )
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        df.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise ArtifactIOError(path, e) from e
