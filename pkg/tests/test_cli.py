import csv
import json
import math
import subprocess
import sys

import pytest

from cama import cli
from cama.imaging import read_image


@pytest.fixture
def runs(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("CAMA_RUNS_DIR", str(root))
    return root


def run_dir(root, sub):
    (path,) = sorted(root.glob(f"*-{sub}"))[-1:]
    return path


TINY = ["--set", "epochs=1", "--set", "width=4", "--set", "patch_size=16", "--set", "batch_size=8"]


def test_synth_counts_and_record(runs, tmp_path):
    out = tmp_path / "data"
    assert cli.main(["synth", "--models", "3", "--n", "50", "--size", "16", "--out", str(out)]) == 0
    with open(out / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 150
    assert len(list(out.rglob("*.png"))) == 150
    assert len(json.loads((out / "models.json").read_text())) == 3
    rd = run_dir(runs, "synth")
    cfg = json.loads((rd / "config.json").read_text())
    assert cfg["command"] == "synth"
    assert (rd / "inputs.json").exists() and (rd / "run.log").exists()


def test_unknown_subcommand(runs, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 2


def test_missing_checkpoint_names_path(runs, tmp_path, capsys):
    img = tmp_path / "x.png"
    missing = tmp_path / "nope.ckpt"
    code = cli.main(["anonymize", "--ckpt", str(missing), "--input", str(img), "--target", "1"])
    assert code == 1
    err = capsys.readouterr().err
    assert "CheckpointError" in err and str(missing) in err


def test_git_hash_matches_git():
    # blob hash of "hello\n" as printed by `git hash-object`
    assert cli.git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_synth_and_split_deterministic(runs, tmp_path):
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli.main(["synth", "--models", "3", "--n", "6", "--size", "16", "--seed", "3", "--out", str(out)]) == 0
        assert cli.main(["split", "--manifest", str(out / "manifest.csv"), "--out", str(out / "splits.json")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a = json.loads((tmp_path / "a" / "splits.json").read_text())
    b = json.loads((tmp_path / "b" / "splits.json").read_text())
    assert a["totals"] == b["totals"]
    assert [[r["path"].split("/")[-2:] for r in a["splits"][k]] for k in sorted(a["splits"])] == [
        [r["path"].split("/")[-2:] for r in b["splits"][k]] for k in sorted(b["splits"])
    ]


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    """Every subcommand once, on a tiny corpus."""
    tmp = tmp_path_factory.mktemp("recipe")
    mp = pytest.MonkeyPatch()
    mp.setenv("CAMA_RUNS_DIR", str(tmp / "runs"))
    runs = tmp / "runs"
    data = tmp / "data"
    assert cli.main(["synth", "--models", "3", "--n", "12", "--size", "32", "--out", str(data)]) == 0
    splits = tmp / "splits.json"
    assert cli.main(["split", "--manifest", str(data / "manifest.csv"), "--out", str(splits)]) == 0
    assert cli.main(["train-e0", "--splits", str(splits), *TINY]) == 0
    ev0 = run_dir(runs, "train-e0") / "evaluator.ckpt"
    assert cli.main(["train-streams", "--splits", str(splits), "--evaluator", str(ev0), *TINY]) == 0
    ev = run_dir(runs, "train-streams") / "evaluator.ckpt"
    assert cli.main(["train-cama", "--splits", str(splits), "--evaluator", str(ev), *TINY, "--set", "lambda_clf=0.5"]) == 0
    cama = run_dir(runs, "train-cama") / "cama.ckpt"
    assert cli.main(["train-target", "--splits", str(splits), *TINY]) == 0
    target = run_dir(runs, "train-target") / "target.ckpt"
    yield dict(tmp=tmp, runs=runs, data=data, splits=splits, ev=ev, cama=cama, target=target)
    mp.undo()


def test_recipe_artifacts(recipe):
    from cama import checkpoint

    head = checkpoint.read_header(recipe["cama"])
    assert head["weights"] == {"lambda_pix": 10.0, "lambda_clf": 0.5}
    assert head["known_classes"] == [1, 2, 3]
    metrics = json.loads((run_dir(recipe["runs"], "train-streams") / "metrics.json").read_text())
    assert set(metrics) >= {"acc_high", "acc_low"}
    assert (run_dir(recipe["runs"], "train-cama") / "train_log.csv").exists()


def test_cama_weights_follow_preset(runs, recipe):
    from cama import checkpoint

    assert cli.main(["train-cama", "--splits", str(recipe["splits"]), "--evaluator", str(recipe["ev"]), *TINY]) == 0
    head = checkpoint.read_header(run_dir(runs, "train-cama") / "cama.ckpt")
    assert head["weights"] == {"lambda_pix": 10.0, "lambda_clf": 0.1}


def test_anonymize_writes_image_and_delta(recipe, monkeypatch, capsys):
    monkeypatch.setenv("CAMA_RUNS_DIR", str(recipe["runs"]))
    src = sorted((recipe["data"] / "model_1").glob("*.png"))[0]
    out, delta = recipe["tmp"] / "anon.png", recipe["tmp"] / "delta.png"
    code = cli.main(["anonymize", "--ckpt", str(recipe["cama"]), "--input", str(src), "--target", "2",
                     "--out", str(out), "--delta", str(delta)])
    assert code == 0
    assert read_image(out).pixels.shape == read_image(src).pixels.shape
    assert delta.exists() and "psnr=" in capsys.readouterr().out


def test_evaluate_and_thresholds(recipe, monkeypatch):
    monkeypatch.setenv("CAMA_RUNS_DIR", str(recipe["runs"]))
    args = ["evaluate", "--splits", str(recipe["splits"]), "--ckpt", str(recipe["cama"]), "--target-ckpt", str(recipe["target"])]
    assert cli.main(args) == 0
    rd = run_dir(recipe["runs"], "evaluate")
    assert (rd / "report.csv").exists() and (rd / "report.txt").exists()
    assert cli.main(args + ["--min-psnr", "200"]) == 3


def test_attack_runs(recipe, monkeypatch):
    monkeypatch.setenv("CAMA_RUNS_DIR", str(recipe["runs"]))
    code = cli.main(["attack", "--splits", str(recipe["splits"]), "--proxy", str(recipe["ev"]), "--kind", "fgsm",
                     "--target-ckpt", str(recipe["target"])])
    assert code == 0
    from cama import bench

    (row,) = bench.parse_report(run_dir(recipe["runs"], "attack") / "report.csv")
    # 4.53 levels round to 5 once the output is stored as 8 bits
    assert row.attack == "fgsm" and row.mean_psnr == pytest.approx(20 * math.log10(255 / 5), abs=0.3)


def test_resume_continues_epochs(recipe, monkeypatch):
    from cama import checkpoint

    monkeypatch.setenv("CAMA_RUNS_DIR", str(recipe["runs"]))
    code = cli.main(["train-target", "--splits", str(recipe["splits"]), "--resume", str(recipe["target"]),
                     *TINY, "--set", "epochs=2"])
    assert code == 0
    assert checkpoint.read_header(run_dir(recipe["runs"], "train-target") / "target.ckpt")["epoch"] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cama", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
