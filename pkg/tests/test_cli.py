import csv
import json

import pytest

from artifactqc.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from artifactqc.data import write_image
from artifactqc.synthetic import synthetic_slide


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_segmentation_workflow(workspace, capsys):
    corpus = workspace / "seg"
    code, out = run(capsys, "ingest", "--synthetic", 12, "--size", 32, "--seed", 1, "--out", corpus)
    assert code == EXIT_OK and json.loads(out.out)["entries"] == 12
    manifest = corpus / "manifest.tsv"

    code, out = run(capsys, "split", "--manifest", manifest, "--counts", "8,2,2", "--seed", 3, "--out", corpus)
    assert code == EXIT_OK and json.loads(out.out) == {"split": str(corpus / "split.tsv"), "train": 8, "valid": 2, "test": 2}

    train_dir = workspace / "train"
    code, out = run(
        capsys, "train-seg", "--manifest", manifest, "--split", corpus / "split.tsv", "--model", "resunet_pp",
        "--width-scale", 0.125, "--epochs", 2, "--batch-size", 4, "--learning-rate", 1e-3, "--out", train_dir,
    )
    assert code == EXIT_OK and json.loads(out.out)["epochs"] == 2
    assert (train_dir / "history.csv").read_text().count("\n") == 3

    eval_dir = workspace / "eval"
    code, out = run(capsys, "eval-seg", "--manifest", manifest, "--split", corpus / "split.tsv", "--model", train_dir / "model.npz", "--out", eval_dir)
    assert code == EXIT_OK
    record = json.loads(out.out)
    assert set(record["threshold_accuracies"]) == {"0.9", "0.85"}

    cv_dir = workspace / "cv"
    code, out = run(
        capsys, "crossval", "--manifest", manifest, "--k", 3, "--n-valid", 1, "--model", "resunet_pp",
        "--width-scale", 0.125, "--epochs", 1, "--batch-size", 4, "--out", cv_dir,
    )
    assert code == EXIT_OK
    rows = list(csv.reader((cv_dir / "crossval.csv").open()))
    assert [r[2] for r in rows[1:]] == ["A", "B", "C"] and rows[1][1] == "B, C"

    code, out = run(capsys, "report", eval_dir, cv_dir, "--out", workspace / "report")
    assert code == EXIT_OK and json.loads(out.out)["metric_rows"] == 4


def test_severity_and_run_workflow(workspace, capsys):
    corpus = workspace / "sev"
    code, _ = run(capsys, "ingest", "--synthetic", 10, "--severity", "--size", 32, "--out", corpus)
    assert code == EXIT_OK
    grid_dir = workspace / "grid"
    code, out = run(
        capsys, "train-grid", "--manifest", corpus / "manifest.tsv", "--backbones", "MobileNet,VGG16,Xception",
        "--optimizers", "rmsprop", "--losses", "categorical_cross_entropy", "--epochs", 5, "--learning-rate", 1e-2, "--out", grid_dir,
    )
    assert code == EXIT_OK and json.loads(out.out) == {"results": str(grid_dir / "grid_results.csv"), "combinations": 3, "failed": 0}

    sel_dir = workspace / "bases"
    code, out = run(capsys, "select-bases", "--grid", grid_dir / "grid_results.csv", "--k", 2, "--out", sel_dir)
    assert code == EXIT_OK and len(out.out.strip().splitlines()) == 3

    stack_dir = workspace / "stack"
    code, out = run(
        capsys, "stack", "--bases", sel_dir / "bases.csv", "--manifest", corpus / "manifest.tsv",
        "--split", grid_dir / "grid_split.tsv", "--compare", "--out", stack_dir,
    )
    assert code == EXIT_OK
    table = list(csv.reader((stack_dir / "comparison.csv").open()))
    assert len(table) == 2 and len(table[0]) == 12
    assert json.loads(out.out.strip().splitlines()[-1])["protocol"] == "out_of_fold"

    code, out = run(
        capsys, "stack", "--bases", sel_dir / "bases.csv", "--manifest", corpus / "manifest.tsv",
        "--split", grid_dir / "grid_split.tsv", "--leaky-protocol", "--out", workspace / "stack_leaky",
    )
    assert code == EXIT_OK and json.loads(out.out)["protocol"] == "leaky"

    seg_dir = workspace / "seg_for_run"
    run(capsys, "ingest", "--synthetic", 4, "--size", 32, "--out", seg_dir)
    run(capsys, "split", "--manifest", seg_dir / "manifest.tsv", "--counts", "2,1,1", "--out", seg_dir)
    run(
        capsys, "train-seg", "--manifest", seg_dir / "manifest.tsv", "--split", seg_dir / "split.tsv", "--model", "resunet_pp",
        "--width-scale", 0.125, "--epochs", 1, "--out", seg_dir,
    )
    image, _ = synthetic_slide([[None, 0.3], [0.1, None]], tile_side=32, seed=2)
    write_image(image, workspace / "slide.png")
    out_dir = workspace / "run"
    code, out = run(
        capsys, "run", "--image", workspace / "slide.png", "--seg", f"tissue_fold={seg_dir / 'model.npz'}",
        "--stack", stack_dir / "stack.joblib", "--out", out_dir,
    )
    assert code == EXIT_OK
    summary = json.loads(out.out)
    assert summary["tiles"] == 4 and sum(v for k, v in summary.items() if k != "tiles") == 4
    assert len(list(out_dir.glob("*_overlay.png"))) == 4


def test_usage_errors(workspace, capsys):
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["split", "--k", "3"])
    assert err.value.code == EXIT_USAGE
    code, out = run(capsys, "split", "--out", workspace / "x")
    assert code == EXIT_USAGE and "--manifest" in out.err
    code, _ = run(capsys, "run", "--image", "x.png", "--out", workspace / "x")
    assert code == EXIT_DATA  # image missing is a data problem
    code, out = run(capsys, "train-seg", "--learning-rate", -1, "--manifest", "m", "--out", workspace / "x")
    assert code == EXIT_USAGE and "learning_rate" in out.err


def test_data_errors(workspace, capsys):
    code, out = run(capsys, "split", "--manifest", workspace / "missing.tsv", "--out", workspace / "x")
    assert code == EXIT_DATA and "missing.tsv" in out.err
    bad = workspace / "bad.tsv"
    bad.write_text("a\tb\n")
    code, out = run(capsys, "split", "--manifest", bad, "--out", workspace / "x")
    assert code == EXIT_DATA and "line 1" in out.err
    corpus = workspace / "small"
    run(capsys, "ingest", "--synthetic", 3, "--size", 16, "--out", corpus)
    code, _ = run(capsys, "split", "--manifest", corpus / "manifest.tsv", "--counts", "2,2,2", "--out", corpus)
    assert code == EXIT_DATA


def test_divergence_exit_code(workspace, capsys):
    corpus = workspace / "div"
    run(capsys, "ingest", "--synthetic", 4, "--size", 32, "--out", corpus)
    run(capsys, "split", "--manifest", corpus / "manifest.tsv", "--counts", "2,1,1", "--out", corpus)
    code, out = run(
        capsys, "train-seg", "--manifest", corpus / "manifest.tsv", "--split", corpus / "split.tsv", "--model", "resunet_pp",
        "--width-scale", 0.125, "--epochs", 5, "--optimizer", "sgd", "--learning-rate", 1e30, "--out", workspace / "div_out",
    )
    assert code == EXIT_DIVERGED and "diverged" in out.err
