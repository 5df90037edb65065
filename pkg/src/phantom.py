#!/usr/bin/env python3
"""
MSVL Toolkit — Synthetic Phantoms (calibration patches and two-class fundus-like images)

Class 1 raises reflectance inside a band window (default 520–600 nm) within a
central disk; everything else is drawn from the same distribution for both
classes, so the class signal is spectral and local.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from calibration import ColorPatch, wiener_fit, save_matrix, write_patches_csv
from reconstruction import save_image, srgb_encode
from spectral import BAND_COUNT, GRID, ReflectanceSpectrum, SpectralCube, write_cube
from utils.errors import ArtifactIOError, RejectedInputError
from utils.io import sha256_hex

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SEVERITY_LEVELS = 5
MANIFEST_NAME = "manifest.jsonl"
# hemoglobin-like absorption peaks (nm, relative strength, width)
HB_PEAKS = ((420.0, 1.0, 30.0), (542.0, 0.55, 14.0), (577.0, 0.6, 14.0))


def _x() -> np.ndarray:
    """Grid position normalized to [0, 1]."""
    wl = np.asarray(GRID.wavelengths_nm)
    return (wl - wl[0]) / (wl[-1] - wl[0])


@dataclass(frozen=True)
class SyntheticCamera:
    centers_nm: Tuple[float, float, float] = (460.0, 540.0, 610.0)
    widths_nm: Tuple[float, float, float] = (30.0, 35.0, 35.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "centers_nm", tuple(float(c) for c in self.centers_nm))
        object.__setattr__(self, "widths_nm", tuple(float(w) for w in self.widths_nm))
        if len(self.centers_nm) != 3 or len(self.widths_nm) != 3:
            raise RejectedInputError("A synthetic camera has exactly 3 channels")
        if min(self.widths_nm) <= 0 or self.noise_sigma < 0:
            raise RejectedInputError("Camera widths must be > 0 and noise_sigma >= 0")

    @property
    def sensitivities(self) -> np.ndarray:
        """(3, 24) non-negative curves, each summing to 1."""
        wl = np.asarray(GRID.wavelengths_nm)
        curves = np.stack([
            np.exp(-0.5 * ((wl - c) / w) ** 2) for c, w in zip(self.centers_nm, self.widths_nm)
        ])
        return curves / curves.sum(axis=1, keepdims=True)

    def render(self, reflectance: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """(..., 24) reflectance -> (..., 3) linear rgb in [0, 1]."""
        rgb = np.asarray(reflectance, dtype=np.float64) @ self.sensitivities.T
        if self.noise_sigma > 0:
            if rng is None:
                raise RejectedInputError("A noisy camera needs an rng")
            rgb = rgb + rng.normal(0.0, self.noise_sigma, size=rgb.shape)
        return np.clip(rgb, 0.0, 1.0)


# -------------------------------
# Color patches
# -------------------------------
def spectral_basis(basis_dim: int) -> np.ndarray:
    """(basis_dim, 24): constant then cos(k pi x), k = 1..basis_dim-1."""
    x = _x()
    return np.stack([np.cos(k * np.pi * x) for k in range(basis_dim)])


def _basis_amplitudes(basis_dim: int) -> np.ndarray:
    return np.array([0.2 * 0.5 ** (k - 1) for k in range(1, basis_dim)])


def synth_patch_set(
    basis_dim: int = 6,
    n_train: int = 24,
    n_holdout: int = 96,
    camera: Optional[SyntheticCamera] = None,
    seed: int = 42,
) -> Tuple[List[ColorPatch], List[ColorPatch]]:
    """Smooth random reflectances, rendered by `camera`, split into train and holdout."""
    if not 1 <= basis_dim <= BAND_COUNT:
        raise RejectedInputError(f"basis_dim must be in 1..{BAND_COUNT}, got {basis_dim}")
    if n_train < 1 or n_holdout < 1:
        raise RejectedInputError("Patch counts must be >= 1")
    camera = camera or SyntheticCamera(noise_sigma=0.01)
    rng = np.random.default_rng(seed)
    basis = spectral_basis(basis_dim)
    amplitudes = _basis_amplitudes(basis_dim)

    total = n_train + n_holdout
    coeffs = np.empty((total, basis_dim))
    coeffs[:, 0] = rng.uniform(0.35, 0.6, size=total)
    if basis_dim > 1:
        coeffs[:, 1:] = rng.uniform(-1.0, 1.0, size=(total, basis_dim - 1)) * amplitudes
    reflectance = np.clip(coeffs @ basis, 0.0, 1.0)
    rgb = camera.render(reflectance, rng)

    patches = [
        ColorPatch(id=f"P{i:03d}", rgb_linear=rgb[i], reference=ReflectanceSpectrum(reflectance[i]))
        for i in range(total)
    ]
    return patches[:n_train], patches[n_train:]


@dataclass(frozen=True)
class PatchSetConfig:
    basis_dim: int = 6
    n_train: int = 24
    n_holdout: int = 96
    seed: int = 42
    camera: SyntheticCamera = field(default_factory=lambda: SyntheticCamera(noise_sigma=0.01))

    def __post_init__(self):
        if isinstance(self.camera, dict):
            object.__setattr__(self, "camera", SyntheticCamera(**self.camera))

    @classmethod
    def from_json(cls, payload: dict) -> "PatchSetConfig":
        unknown = set(payload or {}) - {f.name for f in fields(cls)}
        if unknown:
            raise RejectedInputError(f"Unknown patch config keys: {sorted(unknown)}")
        return cls(**(payload or {}))

    def generate(self) -> Tuple[List[ColorPatch], List[ColorPatch]]:
        return synth_patch_set(self.basis_dim, self.n_train, self.n_holdout, self.camera, self.seed)


# -------------------------------
# Fundus phantoms
# -------------------------------
@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    n_train: int = 400
    n_val: int = 50
    n_test: int = 150
    effect_window_nm: Tuple[float, float] = (520.0, 600.0)
    effect_magnitude: float = 0.08
    disk_radius_fraction: float = 0.2
    vessel_count: int = 6
    vessel_width: float = 1.5
    noise_sigma: float = 0.004
    seed: int = 42
    camera: SyntheticCamera = field(default_factory=SyntheticCamera)

    def __post_init__(self):
        object.__setattr__(self, "effect_window_nm", tuple(float(v) for v in self.effect_window_nm))
        if isinstance(self.camera, dict):
            object.__setattr__(self, "camera", SyntheticCamera(**self.camera))
        if self.image_size < 8:
            raise RejectedInputError(f"image_size must be >= 8, got {self.image_size}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise RejectedInputError("Split sizes must be >= 0")
        if (self.n_train == 0) != (self.n_val == 0):
            raise RejectedInputError("train and val must both be empty (test-only generation) or both non-empty")
        lo, hi = self.effect_window_nm
        if not (GRID.wavelengths_nm[0] <= lo <= hi <= GRID.wavelengths_nm[-1]):
            raise RejectedInputError(f"Effect window {self.effect_window_nm} is outside 450..680 nm")
        if not GRID.window(lo, hi).any():
            raise RejectedInputError(f"Effect window {self.effect_window_nm} contains no band")
        if self.effect_magnitude < 0 or self.noise_sigma < 0 or self.vessel_count < 0:
            raise RejectedInputError("effect_magnitude, noise_sigma and vessel_count must be >= 0")

    @classmethod
    def from_json(cls, payload: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise RejectedInputError(f"Unknown phantom config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["effect_window_nm"] = list(self.effect_window_nm)
        payload["camera"] = {k: list(v) if isinstance(v, tuple) else v for k, v in payload["camera"].items()}
        return payload


@dataclass(frozen=True)
class PhantomImage:
    index: int
    split: str
    label: int
    group: str
    cube: SpectralCube
    rgb8: np.ndarray


def background_spectrum(rng: np.random.Generator) -> np.ndarray:
    """Non-decreasing 24-band fundus background (reflectance rises with wavelength)."""
    x = _x()
    base = rng.uniform(0.12, 0.22)
    rise = rng.uniform(0.25, 0.40)
    return base + rise * x ** 1.5


def hemoglobin_absorption() -> np.ndarray:
    wl = np.asarray(GRID.wavelengths_nm)
    hb = sum(s * np.exp(-0.5 * ((wl - c) / w) ** 2) for c, w, s in HB_PEAKS)
    return hb / hb.max()


def _vessel_mask(rng: np.random.Generator, size: int, count: int, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size))
    for _ in range(count):
        p0 = rng.uniform(0, size, size=2)
        angle = rng.uniform(0, np.pi)
        d = np.array([np.cos(angle), np.sin(angle)])
        # distance of every pixel to the infinite line through p0 along d
        dist = np.abs((xx - p0[0]) * d[1] - (yy - p0[1]) * d[0])
        mask = np.maximum(mask, np.clip(1.0 - dist / width, 0.0, 1.0))
    return mask


def effect_profile(config: PhantomConfig) -> np.ndarray:
    """Per-band indicator of the class-effect window."""
    return GRID.window(*config.effect_window_nm).astype(np.float64)


def disk_mask(config: PhantomConfig) -> np.ndarray:
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    return (np.hypot(yy - c, xx - c) <= config.disk_radius_fraction * size).astype(np.float64)


def _severity(rng: np.random.Generator, label: int) -> int:
    if label == 0:
        return int(rng.choice([0, 1, 2], p=[0.5, 0.3, 0.2]))
    return int(rng.choice([1, 2, 3, 4], p=[0.2, 0.3, 0.3, 0.2]))


def effect_scale(group: int) -> float:
    """Multiplier on `effect_magnitude` for a positive image of severity `group`.

    Linear in severity: 1, 2, 3, 4 map to 0.70, 0.85, 1.00, 1.15, so grade 3
    carries exactly the configured magnitude.
    """
    if not 1 <= group <= 4:
        raise RejectedInputError(f"Positive severity must be in 1..4, got {group}")
    return 0.7 + 0.15 * (group - 1)


def render_phantom(config: PhantomConfig, index: int, split: str, label: int) -> PhantomImage:
    """Render one phantom; positives get the class effect scaled by `effect_scale` of their severity."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    illumination = 1.0 - 0.15 * (np.hypot(yy - c, xx - c) / (size / 2.0)) ** 2

    spectrum = background_spectrum(rng)
    cube = illumination[None, :, :] * spectrum[:, None, None]
    vessels = _vessel_mask(rng, size, config.vessel_count, config.vessel_width)
    depth = rng.uniform(0.4, 0.7)
    cube = cube * (1.0 - depth * vessels[None, :, :] * hemoglobin_absorption()[:, None, None])

    group = _severity(rng, label)
    if label == 1:
        magnitude = config.effect_magnitude * effect_scale(group)
        cube = cube + magnitude * effect_profile(config)[:, None, None] * disk_mask(config)[None, :, :]

    if config.noise_sigma > 0:
        cube = cube + rng.normal(0.0, config.noise_sigma, size=cube.shape)
    cube = np.clip(cube, 0.0, 1.0)

    rgb = config.camera.render(np.moveaxis(cube, 0, -1), rng if config.camera.noise_sigma > 0 else None)
    return PhantomImage(
        index=index, split=split, label=label, group=str(group),
        cube=SpectralCube(width=size, height=size, data=cube.astype(np.float32)),
        rgb8=srgb_encode(rgb),
    )


def _plan(config: PhantomConfig) -> List[Tuple[int, str, int]]:
    """(index, split, label) for every image; labels balanced within each split."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC1A55]))
    plan = []
    index = 0
    for split, n in zip(SPLITS, (config.n_train, config.n_val, config.n_test)):
        labels = rng.permutation(np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64))
        for label in labels:
            plan.append((index, split, int(label)))
            index += 1
    return plan


def synth_fundus_dataset(
    config: PhantomConfig,
    out_dir: str,
    emit_cubes: bool = False,
    threads: int = 1,
    calibration_patches: int = 96,
) -> List[Dict]:
    """Write PNG images + manifest.jsonl (+ .msc ground truth) under `out_dir`.

    Also writes the camera's calibration patches and the fitted `matrix.json`,
    so the directory carries everything `train`/`evaluate` need.
    With every split empty only `out_dir` itself is created.
    """
    plan = _plan(config)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(out_dir, e) from e

    def work(item):
        index, split, label = item
        img = render_phantom(config, index, split, label)
        name = f"{split}/img_{index:05d}"
        save_image(os.path.join(out_dir, name + ".png"), img.rgb8)
        record = {"path": name + ".png", "label": label, "split": split, "group": img.group}
        if emit_cubes:
            write_cube(img.cube, os.path.join(out_dir, name + ".msc"))
            record["cube"] = name + ".msc"
        return record

    if threads > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, plan))
    else:
        records = [work(item) for item in plan]

    if records:
        manifest_path = os.path.join(out_dir, MANIFEST_NAME)
        try:
            with open(manifest_path, "w", encoding="utf-8") as f:
                for record in records:
                    f.write(json.dumps(record) + "\n")
        except OSError as e:
            raise ArtifactIOError(manifest_path, e) from e

        train, holdout = synth_patch_set(
            basis_dim=6, n_train=24, n_holdout=calibration_patches,
            camera=SyntheticCamera(config.camera.centers_nm, config.camera.widths_nm, noise_sigma=0.01),
            seed=config.seed,
        )
        write_patches_csv(os.path.join(out_dir, "patches_train.csv"), train)
        write_patches_csv(os.path.join(out_dir, "patches_holdout.csv"), holdout)
        save_matrix(os.path.join(out_dir, "matrix.json"), wiener_fit(train))

    logger.info("Generated %d phantom images in %s (cubes=%s)", len(records), out_dir, emit_cubes)
    return records


def manifest_checksum(records: List[Dict]) -> str:
    return sha256_hex("".join(json.dumps(r) + "\n" for r in records).encode("utf-8"))


def load_manifest(data_dir: str) -> List[Dict]:
    path = os.path.join(data_dir, MANIFEST_NAME)
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    _ = record["path"], int(record["label"]), record["split"]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise RejectedInputError(f"{path}:{line_no}: bad manifest record ({e})") from e
                records.append(record)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    return records
