#!/usr/bin/env python3
"""
MSVL Toolkit — Model Comparison Runs

Trains every requested variant on one dataset, picks each cutoff on the
validation split and reports the test split in the comparison-table layout.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from calibration import TransformationMatrix
from metrics import (
    TABLE_HEADER,
    EvalReport,
    ScoredSample,
    delong_test,
    evaluate,
    format_row,
    mean_roc_curve,
    write_scores_csv,
    youden_cutoff,
)
from model import Arch, Variant, table_variants
from topology import parse_label
from train import TrainConfig, load_dataset, score_dataset, train, write_history_csv
from utils.errors import ArtifactIOError, RejectedInputError
from utils.io import write_json
from weights import save_params

logger = logging.getLogger(__name__)

REFERENCE_KEY = "cfp"
DEFAULT_VARIANTS = ("cfp", "cmi-560", "ring", "full", "jumper-2")


@dataclass
class VariantRun:
    variant: Variant
    report: EvalReport
    test_scores: List[ScoredSample]


@dataclass
class ExperimentResult:
    runs: List[VariantRun]
    summary_rows: List[EvalReport]
    reference: str

    @property
    def rows(self) -> List[EvalReport]:
        return [r.report for r in self.runs] + self.summary_rows


def resolve_variants(keys: Optional[Sequence[str]] = None) -> List[Variant]:
    """Variant keys (`cfp`, `cmi-560`, `ring`, `full`, `jumper-3`, `jumper-3+ring`) -> Variants."""
    known: Dict[str, Variant] = {v.key: v for v in table_variants()}
    known.update({v.key: v for v in table_variants(include_ring=True)})
    out = []
    for key in keys or DEFAULT_VARIANTS:
        key = key.strip().lower()
        if key == "all":
            out.extend(table_variants())
            continue
        if key not in known:
            raise RejectedInputError(f"Unknown model variant {key!r}; expected one of {sorted(known)} or 'all'")
        out.append(known[key])
    seen = set()
    unique = [v for v in out if not (v.key in seen or seen.add(v.key))]
    if not unique:
        raise RejectedInputError("No model variants selected")
    return unique


def _variant_config(base: TrainConfig, variant: Variant) -> TrainConfig:
    return base.replace(arch=variant.arch.value, band=variant.band, topology=variant.topology)


def _mean_report(reports: Sequence[EvalReport], name: str) -> EvalReport:
    def avg(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in reports]))

    return EvalReport(
        accuracy=avg("accuracy"), sensitivity=avg("sensitivity"), specificity=avg("specificity"),
        precision=avg("precision"), f1=avg("f1"), auroc=avg("auroc"), ci_low=avg("ci_low"),
        ci_high=avg("ci_high"), cutoff=avg("cutoff"), n_pos=reports[0].n_pos, n_neg=reports[0].n_neg,
        model=name, roc=mean_roc_curve([r.roc for r in reports]),
    )


def format_table(rows: Sequence[EvalReport]) -> str:
    width = max([len("Model")] + [len(r.model) for r in rows])
    lines = [f"{'Model':<{width}}\t{TABLE_HEADER}"]
    lines += [f"{r.model:<{width}}\t{format_row(r)}" for r in rows]
    return "\n".join(lines) + "\n"


def run_experiment(
    data_dir: str,
    matrix: TransformationMatrix,
    train_config: TrainConfig,
    variants: Sequence[Variant],
    out_dir: str,
    resamples: int = 2000,
    seed: int = 0,
    threads: int = 1,
) -> ExperimentResult:
    if not variants:
        raise RejectedInputError("No model variants selected")
    needs_cubes = any(v.arch is not Arch.RGB_BASELINE for v in variants)
    data = load_dataset(data_dir, matrix if needs_cubes else None, splits=("train", "val", "test"), threads=threads)
    for split in ("train", "val", "test"):
        if not data.get(split):
            raise RejectedInputError(f"{data_dir}: split {split!r} is empty")

    runs: List[VariantRun] = []
    for variant in variants:
        config = _variant_config(train_config, variant)
        topology = parse_label(variant.topology) if variant.topology else None
        logger.info("Training %s (%s)", variant.name, variant.key)
        params, history = train(config, data["train"], data["val"], topology=topology)

        cutoff = youden_cutoff(score_dataset(params, data["val"], batch_size=config.batch_size, threads=threads))
        test_scores = score_dataset(params, data["test"], batch_size=config.batch_size, threads=threads)
        report = evaluate(test_scores, cutoff, resamples=resamples, seed=seed, model=variant.name, threads=threads)

        run_dir = os.path.join(out_dir, variant.key)
        save_params(params, os.path.join(run_dir, "weights.bin"))
        write_history_csv(os.path.join(run_dir, "history.csv"), history)
        write_scores_csv(os.path.join(run_dir, "test_scores.csv"), test_scores)
        runs.append(VariantRun(variant, report, test_scores))

    reference = next((r for r in runs if r.variant.key == REFERENCE_KEY), runs[0])
    reference.report.is_reference = True
    labels = [s.label for s in reference.test_scores]
    for run in runs:
        if run is reference:
            continue
        result = delong_test([s.score for s in run.test_scores], [s.score for s in reference.test_scores], labels)
        run.report.p_value = result.p_value
        run.report.compared_to = reference.variant.name

    summary_rows: List[EvalReport] = []
    single = [r.report for r in runs if r.variant.arch is Arch.SINGLE_BAND]
    if single:
        summary_rows.append(_mean_report(single, "CMI mean"))
        best = max(single, key=lambda r: r.auroc)
        summary_rows.append(replace(best, model=f"CMI max ({best.model})", is_reference=False))

    result = ExperimentResult(runs=runs, summary_rows=summary_rows, reference=reference.variant.name)
    for run in runs:
        write_json(os.path.join(out_dir, run.variant.key, "report.json"), run.report.to_json())
    write_json(os.path.join(out_dir, "summary.json"), {
        "reference": result.reference,
        "train_config": train_config.to_json(),
        "rows": [r.to_json() for r in result.rows],
    })
    summary_path = os.path.join(out_dir, "summary.txt")
    try:
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write(format_table(result.rows))
    except OSError as e:
        raise ArtifactIOError(summary_path, e) from e
    logger.info("Experiment with %d variants written to %s", len(runs), out_dir)
    return result
