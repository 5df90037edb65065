#!/usr/bin/env python3
"""
MSVL Toolkit — Training and Scoring

Datasets come from a phantom directory: manifest.jsonl plus PNG images. Each
image is decoded once and, for the spectral architectures, reconstructed into
a 24-band cube with the calibration matrix.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import autograd as ag
from calibration import TransformationMatrix
from metrics import ScoredSample, auroc
from model import Arch, ModelConfig, ModelParams, forward_logits, init_params, model_input, predict_scores
from optim import OptimizerState, adam_step
from phantom import load_manifest
from reconstruction import LinearRgbImage, load_image, reconstruct_cube
from spectral import SpectralCube
from topology import GraphTopology, parse_label
from utils.errors import ArtifactIOError, DegenerateInputError, NumericFault, RejectedInputError

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_auroc", "best"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 8  # 0 disables early stopping
    arch: str = "gnn_msvl"
    band: Optional[int] = None
    topology: Optional[str] = "jumper-2"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_json(self.model))
        Arch.parse(self.arch)
        if self.epochs < 0:
            raise RejectedInputError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise RejectedInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise RejectedInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 0:
            raise RejectedInputError(f"patience must be >= 0, got {self.patience}")

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload or {}) - known
        if unknown:
            raise RejectedInputError(f"Unknown training config keys: {sorted(unknown)}")
        return cls(**(payload or {}))

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
            "seed": self.seed, "patience": self.patience, "arch": self.arch, "band": self.band,
            "topology": self.topology, "model": self.model.to_json(),
        }

    def replace(self, **changes) -> "TrainConfig":
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        payload.update(changes)
        return TrainConfig(**payload)

    def build_topology(self) -> Optional[GraphTopology]:
        if Arch.parse(self.arch) is not Arch.GNN_MSVL:
            return None
        if not self.topology:
            raise RejectedInputError("gnn_msvl training needs a topology label (e.g. jumper-2)")
        return parse_label(self.topology)


@dataclass(frozen=True)
class LabeledSample:
    id: str
    label: int
    image: LinearRgbImage
    cube: Optional[SpectralCube] = None
    group: Optional[str] = None

    def input_for(self, arch: Arch) -> Union[LinearRgbImage, SpectralCube]:
        if arch is Arch.RGB_BASELINE:
            return self.image
        if self.cube is None:
            raise RejectedInputError(f"Sample {self.id}: {arch.value} needs a reconstructed cube")
        return self.cube


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float
    best: bool


# -------------------------------
# Datasets
# -------------------------------
def load_dataset(
    data_dir: str,
    matrix: Optional[TransformationMatrix],
    splits: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> Dict[str, List[LabeledSample]]:
    """Samples per split; cubes are reconstructed only when a matrix is given."""
    records = load_manifest(data_dir)
    if splits is not None:
        records = [r for r in records if r["split"] in splits]

    def work(record) -> Tuple[str, LabeledSample]:
        image = load_image(os.path.join(data_dir, record["path"]), decode_srgb=True)
        cube = reconstruct_cube(matrix, image, srgb_decoded=True)[0] if matrix is not None else None
        group = record.get("group")
        sample = LabeledSample(
            id=record["path"], label=int(record["label"]), image=image, cube=cube,
            group=str(group) if group is not None else None,
        )
        return record["split"], sample

    if threads > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            loaded = list(pool.map(work, records))
    else:
        loaded = [work(r) for r in records]

    out: Dict[str, List[LabeledSample]] = {s: [] for s in (splits or ())}
    for split, sample in loaded:
        out.setdefault(split, []).append(sample)
    logger.info("Loaded %s from %s", {k: len(v) for k, v in out.items()}, data_dir)
    return out


def stack_inputs(params: ModelParams, samples: Sequence[LabeledSample]) -> np.ndarray:
    """(N, C, H, W) model inputs for `samples`."""
    if not samples:
        raise RejectedInputError("No samples to stack")
    return np.stack([model_input(params, s.input_for(params.arch)) for s in samples])


def _check_disjoint(train_set: Sequence[LabeledSample], val_set: Sequence[LabeledSample]) -> None:
    overlap = {s.id for s in train_set} & {s.id for s in val_set}
    if overlap:
        raise RejectedInputError(f"Train and validation splits overlap: {sorted(overlap)[:5]}")


# -------------------------------
# Training
# -------------------------------
def train(
    config: TrainConfig,
    train_set: Sequence[LabeledSample],
    val_set: Sequence[LabeledSample],
    topology: Optional[GraphTopology] = None,
) -> Tuple[ModelParams, List[EpochRecord]]:
    """Adam on mean cross-entropy; returns the best-validation-AUROC weights and the epoch history."""
    if not train_set or not val_set:
        raise RejectedInputError(f"Empty split: {len(train_set)} train, {len(val_set)} validation samples")
    _check_disjoint(train_set, val_set)
    val_labels = [s.label for s in val_set]
    if len(set(val_labels)) < 2:
        raise DegenerateInputError("Validation split needs both classes to rank checkpoints by AUROC")

    arch = Arch.parse(config.arch)
    if topology is None:
        topology = config.build_topology()
    params = init_params(arch, config.model, topology=topology, band=config.band, seed=config.seed)
    history: List[EpochRecord] = []
    if config.epochs == 0:
        return params, history

    x_train = stack_inputs(params, train_set)
    y_train = np.array([s.label for s in train_set], dtype=np.int64)
    x_val = stack_inputs(params, val_set)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = OptimizerState.for_params(params.parameters(), lr=config.learning_rate)
    best = params.copy()
    best_auroc = -math.inf
    stale = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_train))
        total, seen = 0.0, 0
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = ag.cross_entropy_loss(forward_logits(params, x_train[idx]), y_train[idx])
                value, grads = ag.eval_with_grads(loss, params.parameters())
                adam_step(state, params.parameters(), grads)
                total += value * len(idx)
                seen += len(idx)
            val_scores = predict_scores(params, x_val, batch_size=config.batch_size)
        except NumericFault as e:
            raise NumericFault(e.message, node=e.node, epoch=epoch) from e
        if not all(np.all(np.isfinite(p.data)) for p in params.parameters()):
            raise NumericFault("non-finite weights after update", epoch=epoch)

        val_auc = auroc([ScoredSample(float(s), y) for s, y in zip(val_scores, val_labels)])
        improved = val_auc > best_auroc
        if improved:
            best_auroc = val_auc
            best = params.copy()
            stale = 0
        else:
            stale += 1
        history.append(EpochRecord(epoch, total / seen, val_auc, improved))
        logger.info("epoch %d/%d loss=%.4f val_auroc=%.4f%s", epoch, config.epochs, total / seen, val_auc,
                    " *" if improved else "")
        if config.patience and stale >= config.patience:
            logger.info("Early stop after %d epochs without improvement", stale)
            break

    logger.info("Best validation AUROC %.4f", best_auroc)
    return best, history


def score_dataset(
    params: ModelParams,
    samples: Sequence[LabeledSample],
    batch_size: int = 16,
    threads: int = 1,
) -> List[ScoredSample]:
    """Positive-class scores, in sample order."""
    if not samples:
        return []
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def work(chunk):
        return predict_scores(params, stack_inputs(params, chunk), batch_size=batch_size)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    scores = np.concatenate(parts)
    return [
        ScoredSample(score=float(score), label=s.label, group=s.group, id=s.id)
        for score, s in zip(scores, samples)
    ]


def write_history_csv(path: Union[str, os.PathLike], history: Sequence[EpochRecord]) -> None:
    df = pd.DataFrame(
        [(h.epoch, h.train_loss, h.val_auroc, int(h.best)) for h in history], columns=HISTORY_COLUMNS
    )
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        df.to_csv(path, index=False)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
