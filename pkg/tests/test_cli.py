import json

import numpy as np
import pytest

from calibration import write_patches_csv
from cli import main
from model import init_params
from spectral import read_cube
from weights import save_params


def run(capsys, *argv):
    code = main(["--json", "--threads", "2", *argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


def small_train_config(tmp_path, **changes):
    payload = {
        "epochs": 1, "batch_size": 4, "seed": 0, "patience": 0, "topology": "jumper-2",
        "model": {
            "encoder": {"stem_channels": 4, "stem_kernel": 3, "stem_stride": 2, "stage_channels": [4],
                        "stage_strides": [1], "kernel_size": 3, "cardinality": 2, "output_dim": 8},
            "classifier_hidden": 4,
        },
    }
    payload.update(changes)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def phantom_dir(tmp_path, capsys):
    config = tmp_path / "phantom.json"
    config.write_text(json.dumps({"image_size": 12, "n_train": 8, "n_val": 4, "n_test": 8, "vessel_count": 1}))
    out = tmp_path / "data"
    code, payload = run(capsys, "synth", "fundus", "--config", str(config), "--out", str(out), "--seed", "4")
    assert code == 0
    assert payload["images"] == 20
    return out


def test_graph_build_and_info(tmp_path, capsys):
    path = str(tmp_path / "g.json")
    code, built = run(capsys, "graph", "--kind", "jumper", "--nodes", "24", "--step", "2", "--out", path)
    assert code == 0 and built["label"] == "jumper-2"
    code, info = run(capsys, "graph", "info", path)
    assert code == 0
    assert info["edge_count"] == 24
    assert info["connected_component_count"] == 2
    assert info["component_sizes"] == [12, 12]


def test_global_flags_after_subcommand(tmp_path, capsys):
    code = main(["graph", "--kind", "ring", "--nodes", "5", "--out", str(tmp_path / "r.json"), "--json"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["edge_count"] == 5


def test_text_output(tmp_path, capsys):
    assert main(["graph", "--kind", "full", "--nodes", "4", "--out", str(tmp_path / "f.json")]) == 0
    assert capsys.readouterr().out.startswith("full: 4 nodes, 6 edges")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["calibrate", "--bogus"]) == 1


def test_graph_without_kind_is_usage_error(capsys):
    assert main(["graph", "--nodes", "4"]) == 1


def test_bad_graph_parameters_are_data_errors(tmp_path, capsys):
    code, payload = run(capsys, "graph", "--kind", "jumper", "--nodes", "24", "--step", "0",
                        "--out", str(tmp_path / "g.json"))
    assert code == 2
    assert payload["exit_code"] == 2


def test_calibrate_and_validate(tmp_path, capsys, exact_patches):
    train, holdout = exact_patches
    write_patches_csv(tmp_path / "train.csv", train)
    write_patches_csv(tmp_path / "holdout.csv", holdout)
    matrix = str(tmp_path / "m.json")

    code, fitted = run(capsys, "calibrate", "--patches", str(tmp_path / "train.csv"), "--out", matrix,
                        "--lambda", "0")
    assert code == 0
    assert fitted["training_rmse"] < 1e-6
    assert fitted["patches"] == 24

    code, checked = run(capsys, "validate", "--matrix", matrix, "--patches", str(tmp_path / "holdout.csv"),
                        "--report", str(tmp_path / "r.csv"))
    assert code == 0
    assert checked["max_rmse"] < 1e-6
    assert (tmp_path / "r.csv").read_text().startswith("id,rmse,set")


def test_non_numeric_patch_cell_is_data_error(tmp_path, capsys, exact_patches):
    train, _ = exact_patches
    write_patches_csv(tmp_path / "train.csv", train)
    lines = (tmp_path / "train.csv").read_text().splitlines()
    cells = lines[1].split(",")
    cells[5] = "abc"
    lines[1] = ",".join(cells)
    (tmp_path / "train.csv").write_text("\n".join(lines) + "\n")
    code, payload = run(capsys, "calibrate", "--patches", str(tmp_path / "train.csv"),
                        "--out", str(tmp_path / "m.json"))
    assert code == 2
    assert payload["exit_code"] == 2


def test_synth_patches(tmp_path, capsys):
    code, payload = run(capsys, "synth", "patches", "--out", str(tmp_path), "--seed", "1")
    assert code == 0
    assert (payload["train"], payload["holdout"]) == (24, 96)


def test_reconstruct_writes_cube_and_meta(phantom_dir, tmp_path, capsys):
    out = str(tmp_path / "cube.msc")
    code, payload = run(capsys, "reconstruct", "--matrix", str(phantom_dir / "matrix.json"),
                        "--input", str(phantom_dir / "test" / "img_00012.png"), "--out", out)
    assert code == 0
    cube = read_cube(out)
    assert (cube.width, cube.height) == (12, 12)
    assert payload["bytes"] == (tmp_path / "cube.msc").stat().st_size
    assert len(payload["band_means"]) == 24
    meta = json.loads((tmp_path / "cube.msc.meta.json").read_text())
    assert meta["srgb_decoded"] is True
    assert 0.0 <= meta["clamped_fraction"] <= 1.0


def test_missing_matrix_is_data_error(tmp_path, capsys):
    code, payload = run(capsys, "reconstruct", "--matrix", str(tmp_path / "nope.json"),
                        "--input", str(tmp_path / "x.png"), "--out", str(tmp_path / "c.msc"))
    assert code == 2
    assert payload["command"] == "reconstruct"


def test_bad_weights_magic(phantom_dir, tmp_path, capsys):
    weights = tmp_path / "w.bin"
    weights.write_bytes(b"NOTMSVLW" + b"\x00" * 32)
    code, _ = run(capsys, "evaluate", "--model", str(weights), "--data", str(phantom_dir),
                  "--report", str(tmp_path / "r.json"))
    assert code == 2


def test_weights_missing_a_tensor_is_data_error(phantom_dir, tmp_path, capsys, small_model_config):
    params = init_params("rgb_baseline", small_model_config)
    del params.tensors["classifier.fc1.b"]
    save_params(params, tmp_path / "w.bin")
    code, _ = run(capsys, "evaluate", "--model", str(tmp_path / "w.bin"), "--data", str(phantom_dir),
                  "--report", str(tmp_path / "r.json"))
    assert code == 2


def test_train_evaluate_compare_plot(phantom_dir, tmp_path, capsys):
    config = small_train_config(tmp_path, arch="rgb_baseline", topology=None)
    weights = str(tmp_path / "cfp.bin")
    code, trained = run(capsys, "train", "--data", str(phantom_dir), "--config", config, "--out", weights,
                        "--history", str(tmp_path / "h.csv"))
    assert code == 0
    assert trained["arch"] == "rgb_baseline" and trained["epochs_run"] == 1

    code, report = run(capsys, "evaluate", "--model", weights, "--data", str(phantom_dir), "--bootstrap", "100",
                       "--report", str(tmp_path / "cfp.json"), "--scores", str(tmp_path / "cfp.csv"),
                       "--name", "CFP baseline")
    assert code == 0
    for key in ("accuracy", "sensitivity", "specificity", "f1", "auroc", "ci_low", "ci_high", "cutoff"):
        assert key in report
    assert report["n_pos"] + report["n_neg"] == 8
    assert report["ci_low"] <= report["auroc"] <= report["ci_high"]
    assert [g["group"] for g in report["strata"]][-1] == "overall"

    code, compared = run(capsys, "evaluate", "--model", weights, "--data", str(phantom_dir), "--bootstrap", "100",
                         "--report", str(tmp_path / "again.json"), "--compare", str(tmp_path / "cfp.csv"))
    assert code == 0
    assert compared["p_value"] == 1.0

    code, plotted = run(capsys, "plot-roc", "--report", str(tmp_path / "cfp.json"),
                        "--report", str(tmp_path / "again.json"), "--out", str(tmp_path / "roc.svg"))
    assert code == 0
    assert [c["model"] for c in plotted["curves"]] == ["CFP baseline", "rgb_baseline"]
    assert (tmp_path / "roc.svg").read_text().count("<polyline") == 2


@pytest.mark.slow
def test_end_to_end_phantom_experiment(tmp_path, capsys):
    phantom = tmp_path / "phantom.json"
    phantom.write_text(json.dumps({"image_size": 32, "n_train": 60, "n_val": 20, "n_test": 40, "seed": 42}))
    data = tmp_path / "data"
    assert run(capsys, "synth", "fundus", "--config", str(phantom), "--out", str(data), "--emit-cubes")[0] == 0

    code, checked = run(capsys, "validate", "--matrix", str(data / "matrix.json"),
                        "--patches", str(data / "patches_holdout.csv"), "--report", str(tmp_path / "cal.csv"))
    assert code == 0 and checked["mean_rmse"] <= 0.05

    config = small_train_config(tmp_path, epochs=6, learning_rate=0.005)
    code, result = run(capsys, "experiment", "--data", str(data), "--config", config, "--out", str(tmp_path / "x"),
                       "--variants", "cfp,cmi-560,jumper-2", "--bootstrap", "200")
    assert code == 0
    rows = {r["model"]: r for r in result["rows"]}
    assert rows["CFP baseline"]["is_reference"]
    gnn = rows["GNN jumper (N=2)"]
    assert 0.0 < gnn["p_value"] <= 1.0
    assert np.isfinite(gnn["auroc"])
    assert (tmp_path / "x" / "summary.txt").is_file()
