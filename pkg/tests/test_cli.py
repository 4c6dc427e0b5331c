import json
import subprocess
import sys

import numpy as np
import pytest

from neuflow.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from neuflow.data import read_flo, write_flo


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen", "--count", "4", "--size", "32", "--seed", "7", "--motion", "translation",
                "--out", str(root / "data")]) == EXIT_OK
    assert run(["train", "--data", str(root / "data"), "--steps", "2", "--batch-size", "2",
                "--out", str(root / "run")]) == EXIT_OK
    return root


def test_gen_layout(workspace):
    names = sorted(p.name for p in (workspace / "data").iterdir())
    assert names[:3] == ["00000_flow.flo", "00000_img1.ppm", "00000_img2.ppm"]
    assert len(names) == 12


def test_train_outputs(workspace):
    rows = [json.loads(x) for x in (workspace / "run" / "train_log.jsonl").read_text().splitlines()]
    assert rows[-1]["step"] == 2 and "final_train_epe" in rows[-1]
    assert (workspace / "run" / "last.pt").exists()


def test_infer_writes_flo_and_png(workspace):
    out = workspace / "pred" / "a.flo"
    code = run(["infer", "--ckpt", str(workspace / "run" / "last.pt"),
                "--img1", str(workspace / "data" / "00000_img1.ppm"),
                "--img2", str(workspace / "data" / "00000_img2.ppm"), "--out", str(out)])
    assert code == EXIT_OK
    assert read_flo(out).shape == (32, 32, 2)
    assert out.with_suffix(".png").exists()


def test_eval(workspace, capsys):
    code = run(["eval", "--ckpt", str(workspace / "run" / "last.pt"), "--data", str(workspace / "data"),
                "--split", "train", "--res", "eighth", "--out", str(workspace / "eval")])
    assert code == EXIT_OK
    assert "mean EPE" in capsys.readouterr().out
    assert json.loads((workspace / "eval" / "eval.jsonl").read_text())["resolution"] == "eighth"


def test_bench(tmp_path, capsys):
    code = run(["bench", "--preset", "tiny", "--size", "64x48", "--res", "eighth", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "64x48" in capsys.readouterr().out
    assert (tmp_path / "bench.csv").exists()


def test_viz(tmp_path):
    write_flo(np.ones((4, 5, 2), np.float32), tmp_path / "f.flo")
    assert run(["viz", str(tmp_path / "f.flo"), "--out", str(tmp_path / "f.png")]) == EXIT_OK
    assert (tmp_path / "f.png").exists()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["train"],
        ["bench", "--size", "0x3"],
        ["bench", "--preset", "tiny", "--set", "no_such_key=1"],
        ["bench", "--preset", "tiny", "--set", "feature_dim=-4"],
    ],
)
def test_usage_errors(argv):
    assert run(argv) == EXIT_USAGE


def test_runtime_error_for_missing_data(tmp_path):
    assert run(["train", "--data", str(tmp_path / "absent"), "--steps", "1"]) == EXIT_RUNTIME


def test_runtime_error_for_bad_checkpoint(tmp_path):
    (tmp_path / "x.pt").write_bytes(b"junk")
    assert run(["eval", "--ckpt", str(tmp_path / "x.pt"), "--data", str(tmp_path)]) == EXIT_RUNTIME


def test_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text("preset: tiny\nmodel:\n  mask_width: 12\n")
    assert run(["bench", "--config", str(tmp_path / "c.yaml"), "--size", "32", "--res", "eighth"]) == EXIT_OK


def test_module_entry_point_logs_invocation():
    proc = subprocess.run([sys.executable, "-m", "neuflow", "bench", "--preset", "tiny", "--size", "32",
                           "--res", "eighth"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    first = proc.stderr.splitlines()[0]
    assert "invocation: neuflow bench --preset tiny --size 32 --res eighth" in first
