import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from texface.analysis import load_correlations
from texface.cli import main
from texface.pipeline import PIPELINE_ARTIFACTS

REPO = Path(__file__).resolve().parents[1]
ITER = ["--iterations", "60"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("workspace")
    subprocess.run(
        [
            sys.executable,
            str(REPO / "scripts" / "make_fixtures.py"),
            "--out", str(ws),
            "--size", "96",
            "--texture-size", "64",
            "--db-size", "4",
        ],
        check=True,
    )
    return ws


@pytest.fixture(scope="module")
def pipeline_run(workspace):
    out = workspace / "run"
    code = main(["pipeline", "--config", str(workspace / "pipeline.cfg"), "--out", str(out)] + ITER)
    assert code == 0
    return out


def test_fixture_workspace_contents(workspace):
    for name in ("model.mmdl", "weights.vggw", "input.png", "input_mask.png", "input_landmarks.txt", "db.grdb", "pipeline.cfg"):
        assert (workspace / name).exists()
    assert len(list((workspace / "db_textures").glob("*.png"))) == 4


def test_pipeline_writes_all_artifacts(pipeline_run):
    for name in PIPELINE_ARTIFACTS:
        assert (pipeline_run / name).exists(), name
    manifest = (pipeline_run / "manifest.txt").read_text().splitlines()
    assert len(manifest) == len(PIPELINE_ARTIFACTS)
    for line, name in zip(manifest, PIPELINE_ARTIFACTS):
        parts = line.split()
        assert parts[0] == name and len(parts[1]) == 64


def test_pipeline_rerun_is_bit_identical(workspace, pipeline_run):
    out2 = workspace / "run_again"
    code = main(["pipeline", "--config", str(workspace / "pipeline.cfg"), "--out", str(out2)] + ITER)
    assert code == 0
    m1 = (pipeline_run / "manifest.txt").read_text()
    m2 = (out2 / "manifest.txt").read_text()
    assert m1 == m2


def test_stage_commands_compose_to_pipeline(workspace, pipeline_run):
    out3 = workspace / "run_staged"
    cfg = ["--config", str(workspace / "pipeline.cfg"), "--out", str(out3)] + ITER
    for command in ("fit", "extract", "analyze", "synthesize", "preview"):
        assert main([command] + cfg) == 0
    for name in PIPELINE_ARTIFACTS:
        assert (out3 / name).read_bytes() == (pipeline_run / name).read_bytes(), name


def test_missing_input_is_exit_code_2(workspace, capsys):
    bad = str(workspace / "nope.png")
    code = main([
        "pipeline", "--config", str(workspace / "pipeline.cfg"),
        "--image", bad, "--out", str(workspace / "run_bad"),
    ])
    assert code == 2
    assert bad in capsys.readouterr().err


def test_missing_config_file_is_exit_code_2(workspace, capsys):
    code = main(["fit", "--config", str(workspace / "absent.cfg")])
    assert code == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_mismatched_gram_layers_is_stage_failure(workspace, pipeline_run, capsys):
    code = main([
        "analyze", "--config", str(workspace / "pipeline.cfg"),
        "--out", str(workspace / "run"),
        "--gram-layers", "conv1_1,conv2_1",
    ])
    assert code == 1
    assert "gram layers" in capsys.readouterr().err


def test_gram_dump(workspace):
    out_grdb = workspace / "single.grdb"
    texture = next((workspace / "db_textures").glob("*.png"))
    code = main([
        "gram-dump", "--config", str(workspace / "pipeline.cfg"),
        "--texture", str(texture), "--entry-id", "probe",
        "--grdb", str(out_grdb),
    ])
    assert code == 0
    db = load_correlations(out_grdb)
    assert [e.entry_id for e in db.entries] == ["probe"]


def test_eval_layers_sweep(workspace, pipeline_run):
    code = main([
        "eval", "layers", "--config", str(workspace / "pipeline.cfg"),
        "--out", str(pipeline_run), "--max-layers", "2",
    ] + ITER)
    assert code == 0
    with open(pipeline_run / "eval_layers.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["gram_layers", "final_loss", "laplacian_variance"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2]
    for r in rows[1:]:
        assert float(r[1]) >= 0.0 and float(r[2]) >= 0.0


def test_eval_lowres_sweep(workspace, pipeline_run):
    code = main([
        "eval", "lowres", "--config", str(workspace / "pipeline.cfg"),
        "--out", str(pipeline_run), "--factors", "1,0.5",
    ] + ITER)
    assert code == 0
    with open(pipeline_run / "eval_lowres.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3
    assert float(rows[1][3]) == 0.0  # drift of the reference factor
    assert np.isfinite(float(rows[2][3]))


def test_build_db_command(workspace, tmp_path):
    subjects = workspace / "subjects"
    subjects.mkdir(exist_ok=True)
    for name in ("input.png", "input_landmarks.txt", "input_mask.png"):
        data = (workspace / name).read_bytes()
        (subjects / name.replace("input", "subj00")).write_bytes(data)
    out = tmp_path / "dbout"
    code = main([
        "build-db", "--config", str(workspace / "pipeline.cfg"),
        "--subjects", str(subjects), "--rounds", "1",
        "--out", str(out),
        "--db-textures", str(out / "textures"),
        "--grdb", str(out / "db.grdb"),
    ])
    assert code == 0
    assert (out / "textures" / "subj00.png").exists()
    db = load_correlations(out / "db.grdb")
    assert [e.entry_id for e in db.entries] == ["subj00"]
