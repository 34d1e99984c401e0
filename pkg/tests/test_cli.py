"""CLI surface: subcommands, file flows, exit codes."""

import json
import subprocess
import sys

import pytest

from vgreg.cli import main
from vgreg.config import PipelineConfig
from vgreg.weights import load_weights
from tests.test_pipeline import TestFileDrivenPairs


@pytest.fixture
def file_pair(tmp_path):
    manifest, cfg = TestFileDrivenPairs().write_pair_files(tmp_path)
    cfg_dict = cfg.to_json_dict()
    cfg_dict["providers"]["visual"] = "file"
    config = PipelineConfig.from_json_dict(cfg_dict)
    cfg_path = tmp_path / "cfg.json"
    config.save(cfg_path)
    weights_path = tmp_path / "w.bin"
    rc = main(["init-weights", "--config", str(cfg_path), "--seed", "0",
               "--mode", "identity_reduction", "--out", str(weights_path)])
    assert rc == 0
    return manifest, cfg_path, weights_path, tmp_path


def test_init_weights_writes_loadable_container(tmp_path):
    out = tmp_path / "w.bin"
    assert main(["init-weights", "--out", str(out)]) == 0
    store = load_weights(out)
    assert "vgt.shared.wr" in store.tensors


def test_register_command(file_pair):
    manifest, cfg_path, weights_path, tmp_path = file_pair
    record = json.loads(manifest.read_text())
    gt_path = tmp_path / "gt.json"
    gt_path.write_text(json.dumps({
        "rotation": record["gt_rotation"], "translation": record["gt_translation"],
    }))
    out = tmp_path / "result.json"
    rc = main([
        "register",
        "--source-cloud", str(tmp_path / record["cloud_a"]),
        "--target-cloud", str(tmp_path / record["cloud_b"]),
        "--source-vfeat", str(tmp_path / record["vfeat_a"]),
        "--target-vfeat", str(tmp_path / record["vfeat_b"]),
        "--camera-a", str(tmp_path / record["camera_a"]),
        "--camera-b", str(tmp_path / record["camera_b"]),
        "--weights", str(weights_path),
        "--config", str(cfg_path),
        "--gt", str(gt_path),
        "--out", str(out),
    ])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["result"]["metrics"]["rmse"] < 0.2
    assert payload["result"]["metrics"]["ir"] > 0.8
    assert "config_hash" in payload


def test_benchmark_command_with_sweep_and_csv(file_pair):
    manifest, cfg_path, weights_path, tmp_path = file_pair
    out = tmp_path / "report.json"
    csv_out = tmp_path / "report.csv"
    rc = main([
        "benchmark", "--pairs", str(manifest), "--config", str(cfg_path),
        "--weights", str(weights_path), "--out", str(out),
        "--csv", str(csv_out), "--noise-sigma", "0,5,10",
    ])
    assert rc == 0
    report = json.loads(out.read_text())
    assert [s["noise_sigma"] for s in report["sweep"]] == [0.0, 5.0, 10.0]
    assert len(csv_out.read_text().strip().splitlines()) == 4


def test_benchmark_majority_failure_exit_code(file_pair, tmp_path):
    manifest, cfg_path, weights_path, _ = file_pair
    record = json.loads(manifest.read_text())
    record["id"] = "broken"
    record["vfeat_a"] = "missing.drfm"
    broken = manifest.parent / "broken.jsonl"
    broken.write_text(json.dumps(record) + "\n")
    out = manifest.parent / "r.json"
    rc = main(["benchmark", "--pairs", str(broken), "--config", str(cfg_path),
               "--weights", str(weights_path), "--out", str(out)])
    assert rc == 4


def test_config_error_exit_code(file_pair):
    manifest, _, weights_path, tmp_path = file_pair
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"voxel_size": -1.0}))
    rc = main(["benchmark", "--pairs", str(manifest), "--config", str(bad_cfg),
               "--weights", str(weights_path), "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_weights_missing_tensor_exit_code(file_pair, tmp_path):
    manifest, cfg_path, _, _ = file_pair
    from vgreg.weights import WeightStore
    import numpy as np

    incomplete = tmp_path / "incomplete.bin"
    WeightStore({"matching.dustbin": np.array([-2.5], dtype=np.float32)}).save(incomplete)
    rc = main(["benchmark", "--pairs", str(manifest), "--config", str(cfg_path),
               "--weights", str(incomplete), "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_data_error_exit_code(file_pair):
    _, cfg_path, weights_path, tmp_path = file_pair
    rc = main(["benchmark", "--pairs", str(tmp_path / "nope.jsonl"),
               "--config", str(cfg_path), "--weights", str(weights_path),
               "--out", str(tmp_path / "r.json")])
    assert rc == 3


def test_dataset_build_command(tmp_path):
    from vgreg.camera import CameraModel
    from tests.test_dataset import plane_depth, write_scene

    camera = CameraModel(fx=50.0, fy=50.0, cx=16.0, cy=12.0, width=32, height=24)
    scene = write_scene(tmp_path, camera, [(plane_depth(32, 24, 1000), [0, 0, 0])] * 4)
    manifest = tmp_path / "scenes.json"
    manifest.write_text(json.dumps({"scenes": [scene]}))
    out = tmp_path / "pairs.jsonl"
    rc = main([
        "dataset", "build", "--manifest", str(manifest), "--stride", "1",
        "--group-size", "60", "--min-overlap", "0.05",
        "--bins", "0.10,0.30,0.70", "--scene-cap", "100",
        "--tau", "0.01", "--out", str(out),
    ])
    assert rc == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 6  # C(4,2)
    assert all(row["overlap"] == 1.0 for row in rows)


def test_console_script_help_runs():
    proc = subprocess.run([sys.executable, "-m", "vgreg.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "register" in proc.stdout
    assert "benchmark" in proc.stdout


def test_reports_byte_identical_across_processes(file_pair):
    manifest, cfg_path, weights_path, tmp_path = file_pair
    blobs = []
    for run in range(2):
        out = tmp_path / f"proc_report{run}.json"
        proc = subprocess.run(
            [sys.executable, "-m", "vgreg.cli", "benchmark",
             "--pairs", str(manifest), "--config", str(cfg_path),
             "--weights", str(weights_path), "--out", str(out),
             "--no-timing"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]
