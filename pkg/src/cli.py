#!/usr/bin/env python3
"""
MSVL Toolkit — Command Line Pipeline

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric fault.
Results go to stdout (one JSON document with --json); logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import dotenv

from utils.env import load_bootstrap_default, load_log_file, load_log_level, load_threads
from utils.errors import MsvlError, RejectedInputError
from utils.io import read_json, write_json

logger = logging.getLogger("msvl")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
USAGE_EXIT = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def setup_logging(level: str, log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def _emit(args: argparse.Namespace, payload: Dict[str, Any], text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


def _matrix_path(args: argparse.Namespace) -> str:
    return args.matrix or os.path.join(args.data, "matrix.json")


# -------------------------------
# Calibration
# -------------------------------
def cmd_calibrate(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_patches_csv, save_matrix, wiener_fit

    patches = load_patches_csv(args.patches)
    m = wiener_fit(patches, lam=args.lam, bias=args.bias)
    save_matrix(args.out, m)
    payload = {
        "command": "calibrate", "matrix": args.out, "matrix_id": m.checksum(), "patches": len(patches),
        "lambda": m.lam, "bias": m.bias, "training_rmse": m.training_rmse,
    }
    _emit(args, payload, f"training_rmse {m.training_rmse:.6g}\nmatrix {m.checksum()} written to {args.out}")
    return payload


def cmd_validate(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_matrix, load_patches_csv, validate_calibration, write_report_csv

    m = load_matrix(args.matrix)
    holdout = load_patches_csv(args.patches)
    training_ids = [p.id for p in load_patches_csv(args.train_patches)] if args.train_patches else None
    report = validate_calibration(m, holdout, training_ids=training_ids)
    write_report_csv(args.report, report)
    payload = {
        "command": "validate", "matrix_id": m.checksum(), "patches": len(holdout),
        "mean_rmse": report.mean_rmse, "max_rmse": report.max_rmse, "report": args.report,
    }
    _emit(args, payload, f"mean_rmse {report.mean_rmse:.6g}\nmax_rmse {report.max_rmse:.6g}")
    return payload


def cmd_reconstruct(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_matrix
    from reconstruction import load_image, reconstruct_cube, write_meta
    from spectral import write_cube

    m = load_matrix(args.matrix)
    decode = not args.no_srgb_decode
    image = load_image(args.input, decode_srgb=decode)
    cube, meta = reconstruct_cube(m, image, threads=args.threads, srgb_decoded=decode)
    size = write_cube(cube, args.out)
    meta_path = args.meta or args.out + ".meta.json"
    write_meta(meta_path, meta)
    payload = {
        "command": "reconstruct", "cube": args.out, "bytes": size, "width": cube.width, "height": cube.height,
        "clamped_fraction": meta.clamped_fraction, "matrix_id": meta.matrix_id,
        "srgb_decoded": meta.srgb_decoded, "band_means": [float(v) for v in cube.band_means()],
        "meta": meta_path,
    }
    _emit(args, payload, f"clamped_fraction {meta.clamped_fraction:.6g}\n{cube.width}x{cube.height} cube written to {args.out}")
    return payload


# -------------------------------
# Graphs
# -------------------------------
def _graph_payload(g, path: str) -> Dict[str, Any]:
    from topology import analyze

    payload = {"label": g.label, "nodes": g.node_count, "edge_count": len(g.edges), "path": path}
    payload.update(analyze(g).to_json())
    return payload


def cmd_graph(args: argparse.Namespace) -> Dict[str, Any]:
    from topology import build_topology, load_topology, save_topology

    if args.action:
        if len(args.action) != 2 or args.action[0] != "info":
            raise UsageError("graph takes either build flags or `info PATH`")
        g = load_topology(args.action[1])
        payload = dict(_graph_payload(g, args.action[1]), command="graph info")
    else:
        if not args.kind or not args.out:
            raise UsageError("graph needs --kind and --out (or `info PATH`)")
        g = build_topology(args.kind, args.nodes, step=args.step, include_ring=args.include_ring)
        save_topology(args.out, g)
        payload = dict(_graph_payload(g, args.out), command="graph")
    text = (
        f"{payload['label']}: {payload['nodes']} nodes, {payload['edge_count']} edges, "
        f"{payload['connected_component_count']} components, diameters {payload['diameters']}"
    )
    _emit(args, payload, text)
    return payload


# -------------------------------
# Synthetic data
# -------------------------------
def _config_payload(path: Optional[str]) -> dict:
    if not path:
        return {}
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise RejectedInputError(f"{path}: config must be a JSON object")
    return payload


def cmd_synth(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import write_patches_csv
    from phantom import PatchSetConfig, PhantomConfig, manifest_checksum, synth_fundus_dataset

    payload = _config_payload(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed

    if args.kind == "patches":
        config = PatchSetConfig.from_json(payload)
        train, holdout = config.generate()
        write_patches_csv(os.path.join(args.out, "patches_train.csv"), train)
        write_patches_csv(os.path.join(args.out, "patches_holdout.csv"), holdout)
        result = {"command": "synth patches", "out": args.out, "train": len(train), "holdout": len(holdout)}
        _emit(args, result, f"{len(train)} train / {len(holdout)} holdout patches written to {args.out}")
        return result

    config = PhantomConfig.from_json(payload)
    records = synth_fundus_dataset(config, args.out, emit_cubes=args.emit_cubes, threads=args.threads)
    write_json(os.path.join(args.out, "phantom_config.json"), config.to_json())
    counts = {s: sum(1 for r in records if r["split"] == s) for s in ("train", "val", "test")}
    result = {
        "command": "synth fundus", "out": args.out, "images": len(records), "splits": counts,
        "manifest_sha256": manifest_checksum(records), "cubes": args.emit_cubes,
    }
    _emit(args, result, f"{len(records)} phantom images {counts} written to {args.out}")
    return result


# -------------------------------
# Models
# -------------------------------
def _load_train_config(path: Optional[str]):
    from train import TrainConfig

    return TrainConfig.from_json(_config_payload(path))


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_matrix
    from model import Arch
    from topology import load_topology
    from train import load_dataset, train, write_history_csv
    from weights import save_params

    config = _load_train_config(args.config)
    changes = {}
    if args.arch:
        changes["arch"] = args.arch
    if args.band is not None:
        changes["band"] = args.band
    config = config.replace(**changes)
    arch = Arch.parse(config.arch)

    topology = None
    if arch is Arch.GNN_MSVL:
        topology = load_topology(args.graph) if args.graph else config.build_topology()
    matrix = load_matrix(_matrix_path(args)) if arch is not Arch.RGB_BASELINE else None

    data = load_dataset(args.data, matrix, splits=("train", "val"), threads=args.threads)
    params, history = train(config, data["train"], data["val"], topology=topology)
    save_params(params, args.out)
    if args.history:
        write_history_csv(args.history, history)

    best = max((h.val_auroc for h in history), default=None)
    payload = {
        "command": "train", "arch": arch.value, "weights": args.out, "epochs_run": len(history),
        "best_val_auroc": best, "topology": topology.label if topology is not None else None,
        "history": [
            {"epoch": h.epoch, "train_loss": h.train_loss, "val_auroc": h.val_auroc, "best": h.best} for h in history
        ],
    }
    best_text = f"{best:.4f}" if best is not None else "n/a"
    _emit(args, payload, f"{arch.value}: {len(history)} epochs, best val AUROC {best_text}, weights {args.out}")
    return payload


def cmd_evaluate(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_matrix
    from metrics import delong_test, evaluate, format_row, read_scores_csv, write_scores_csv, youden_cutoff, TABLE_HEADER
    from model import Arch
    from train import load_dataset, score_dataset
    from weights import load_params

    params = load_params(args.model)
    matrix = load_matrix(_matrix_path(args)) if params.arch is not Arch.RGB_BASELINE else None
    splits = tuple(dict.fromkeys([args.split, args.cutoff_from]))
    data = load_dataset(args.data, matrix, splits=splits, threads=args.threads)
    for split in splits:
        if not data.get(split):
            raise RejectedInputError(f"{args.data}: split {split!r} is empty")

    cutoff = youden_cutoff(score_dataset(params, data[args.cutoff_from], threads=args.threads))
    scores = score_dataset(params, data[args.split], threads=args.threads)
    report = evaluate(scores, cutoff, resamples=args.bootstrap or load_bootstrap_default(), seed=args.seed,
                      model=args.name or params.arch.value, threads=args.threads)

    if args.compare:
        other = {s.id: s for s in read_scores_csv(args.compare)}
        missing = [s.id for s in scores if s.id not in other]
        if missing:
            raise RejectedInputError(f"{args.compare}: no scores for {len(missing)} samples, e.g. {missing[:3]}")
        mismatched = [s.id for s in scores if other[s.id].label != s.label]
        if mismatched:
            raise RejectedInputError(f"{args.compare}: labels disagree for {mismatched[:3]}")
        result = delong_test([s.score for s in scores], [other[s.id].score for s in scores],
                             [s.label for s in scores])
        report.p_value = result.p_value
        report.compared_to = args.compare

    write_json(args.report, report.to_json())
    if args.scores:
        write_scores_csv(args.scores, scores)

    payload = dict(report.to_json(), command="evaluate", report_path=args.report, split=args.split)
    lines = [TABLE_HEADER, format_row(report)]
    if report.strata:
        lines.append("")
        lines += [f"{g.group}\tn={g.n}\taccuracy {100 * g.accuracy:.1f}%" for g in report.strata]
    _emit(args, payload, "\n".join(lines))
    return payload


def cmd_plot_roc(args: argparse.Namespace) -> Dict[str, Any]:
    from metrics import EvalReport
    from plot import write_roc_svg

    reports = []
    for path in args.report:
        report = EvalReport.from_json(read_json(path))
        if not report.model:
            report.model = os.path.splitext(os.path.basename(path))[0]
        reports.append(report)
    write_roc_svg(args.out, reports, title=args.title)
    payload = {"command": "plot-roc", "out": args.out, "curves": [{"model": r.model, "auroc": r.auroc} for r in reports]}
    _emit(args, payload, f"{len(reports)} ROC curves plotted to {args.out}")
    return payload


def cmd_experiment(args: argparse.Namespace) -> Dict[str, Any]:
    from calibration import load_matrix
    from experiment import format_table, resolve_variants, run_experiment

    config = _load_train_config(args.config)
    variants = resolve_variants(args.variants.split(",") if args.variants else None)
    result = run_experiment(
        args.data, load_matrix(_matrix_path(args)), config, variants, args.out,
        resamples=args.bootstrap or load_bootstrap_default(), seed=args.seed, threads=args.threads,
    )
    payload = {
        "command": "experiment", "out": args.out, "reference": result.reference,
        "rows": [r.to_json() for r in result.rows],
    }
    _emit(args, payload, format_table(result.rows))
    return payload


# -------------------------------
# Parser
# -------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="Print one JSON document instead of text")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="Worker threads (default: MSVL_THREADS or all cores)")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])

    p = _Parser(prog="msvl", description="MSVL Toolkit — multispectral reconstruction and graph-attention models")
    p.add_argument("--json", action="store_true", default=False, help="Print one JSON document instead of text")
    p.add_argument("--threads", type=int, default=None, help="Worker threads (default: MSVL_THREADS or all cores)")
    p.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("calibrate", parents=[common], help="Fit the RGB -> 24-band Wiener matrix")
    s.add_argument("--patches", required=True, help="Training patches CSV (id,r,g,b,R450..R680)")
    s.add_argument("--out", required=True, help="Matrix JSON to write")
    s.add_argument("--lambda", dest="lam", type=float, default=None, help="Ridge term (default: scaled trace)")
    s.add_argument("--bias", action="store_true", help="Add a constant column to the camera response")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("validate", parents=[common], help="Per-patch RMSE of a matrix on holdout patches")
    s.add_argument("--matrix", required=True)
    s.add_argument("--patches", required=True)
    s.add_argument("--report", required=True, help="CSV report (id,rmse,set)")
    s.add_argument("--train-patches", default=None, help="Training CSV, to label train/holdout membership")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("reconstruct", parents=[common], help="Reconstruct a 24-band cube from an RGB image")
    s.add_argument("--matrix", required=True)
    s.add_argument("--input", required=True, help="PNG or PPM image")
    s.add_argument("--out", required=True, help=".msc cube to write")
    s.add_argument("--meta", default=None, help="Sidecar JSON (default: OUT.meta.json)")
    s.add_argument("--no-srgb-decode", action="store_true", help="Treat 8-bit values as linear")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("graph", parents=[common], help="Build a cross-spectral topology, or `graph info PATH`")
    s.add_argument("action", nargs="*", help="`info PATH` to describe an existing topology file")
    s.add_argument("--kind", choices=["ring", "full", "jumper"])
    s.add_argument("--nodes", type=int, default=24)
    s.add_argument("--step", type=int, default=None)
    s.add_argument("--include-ring", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("synth", parents=[common], help="Generate synthetic patches or fundus phantoms")
    s.add_argument("kind", choices=["patches", "fundus"])
    s.add_argument("--config", default=None, help="JSON config (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--emit-cubes", action="store_true", help="Also write ground-truth .msc cubes (fundus)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="Train one model on a phantom dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=["rgb_baseline", "single_band", "gnn_msvl"], default=None)
    s.add_argument("--band", type=int, default=None)
    s.add_argument("--graph", default=None, help="Topology JSON (gnn_msvl)")
    s.add_argument("--config", default=None, help="Training config JSON")
    s.add_argument("--matrix", default=None, help="Matrix JSON (default: DATA/matrix.json)")
    s.add_argument("--out", required=True, help="Weights file to write")
    s.add_argument("--history", default=None, help="Per-epoch history CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="Score a split and write an evaluation report")
    s.add_argument("--model", required=True, help="Weights file")
    s.add_argument("--data", required=True)
    s.add_argument("--matrix", default=None, help="Matrix JSON (default: DATA/matrix.json)")
    s.add_argument("--split", default="test")
    s.add_argument("--cutoff-from", default="val", help="Split on which the Youden cutoff is chosen")
    s.add_argument("--report", required=True)
    s.add_argument("--scores", default=None, help="Write the scored split as CSV")
    s.add_argument("--compare", default=None, help="Scores CSV of another model for a DeLong test")
    s.add_argument("--bootstrap", type=int, default=None, help="Bootstrap resamples (default: MSVL_BOOTSTRAP or 2000)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default=None, help="Model name in the report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot-roc", parents=[common], help="Plot ROC curves from evaluation reports as SVG")
    s.add_argument("--report", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--title", default="ROC")
    s.set_defaults(func=cmd_plot_roc)

    s = sub.add_parser("experiment", parents=[common], help="Train and compare several model variants")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--matrix", default=None, help="Matrix JSON (default: DATA/matrix.json)")
    s.add_argument("--out", required=True)
    s.add_argument("--variants", default=None, help="Comma-separated keys, e.g. cfp,cmi-560,jumper-2 or all")
    s.add_argument("--bootstrap", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    dotenv.load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level or load_log_level(), load_log_file())
    args.threads = load_threads(args.threads)

    try:
        args.func(args)
    except UsageError as e:
        sys.stderr.write(f"msvl {args.command}: error: {e}\n")
        return USAGE_EXIT
    except MsvlError as e:
        logger.error("%s failed: %s", args.command, e)
        if args.json:
            sys.stdout.write(json.dumps({"command": args.command, "error": str(e), "exit_code": e.exit_code}) + "\n")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
