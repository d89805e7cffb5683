import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from sleepstager import pipeline
from sleepstager.aggregate import scatter_decisions
from sleepstager.cli import main
from sleepstager.config import load_config
from sleepstager.render import render_svg, render_text

GOLDEN = Path(__file__).parent / "golden"

CONFIG = """\
[data]
bundle_dir = bundles
out_dir = out

[model]
filters_per_width = 4
tau = 1

[training]
epochs = 3
batch_size = 50
learning_rate = 0.002
precision = float32

[split]
protocol = kfold
k = 2
n_validation = 1
"""


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    assert main(["synth", "--subjects", "6", "--epochs-per-subject", "150", "--seed", "1",
                 "--out-dir", str(root / "bundles")]) == 0
    (root / "exp.ini").write_text(CONFIG)
    assert main(["run", "--config", str(root / "exp.ini")]) == 0
    return root


def test_synth_writes_bundles(experiment):
    names = sorted(p.name for p in (experiment / "bundles").iterdir())
    assert names == [f"S{i:03d}" for i in range(6)]
    assert (experiment / "bundles" / "S000" / "manifest.txt").exists()


def test_run_outputs(experiment):
    out = experiment / "out"
    summary = json.loads((out / "summary.json").read_text())
    pooled = summary["pooled"]
    assert pooled["epochs"] == 900
    for key in ("accuracy", "kappa", "macro_f1"):
        assert pooled[key] is not None
    assert set(pooled["slot_accuracy"]) == {"-1", "0", "1"}
    assert set(pooled["voting_accuracy"]) == {"additive", "multiplicative"}
    for fold in ("fold_00", "fold_01"):
        for name in ("model.ssck", "history.csv", "report.txt", "report.csv"):
            assert (out / fold / name).exists()
        assert len(list((out / fold / "grids").glob("*.sspg"))) == 3
    assert len(list((out / "cache").glob("*.sstf"))) == 6
    assert "overall_accuracy" in (out / "report.txt").read_text()
    assert (out / "run.log").exists()


def test_pooled_confusion_is_sum_of_folds(experiment, tmp_path):
    shutil.copytree(experiment / "bundles", tmp_path / "bundles")
    (tmp_path / "exp.ini").write_text(CONFIG)
    result = pipeline.run_experiment(load_config(tmp_path / "exp.ini"))
    total = sum(r.confusion for r in result.fold_reports)
    np.testing.assert_array_equal(result.pooled.confusion, total)
    assert result.summary["pooled"]["accuracy"] == pytest.approx(
        np.trace(total) / total.sum())


def test_rerun_is_bit_identical(experiment, tmp_path):
    shutil.copytree(experiment / "bundles", tmp_path / "bundles")
    (tmp_path / "exp.ini").write_text(CONFIG)
    assert main(["run", "--config", str(tmp_path / "exp.ini")]) == 0
    a, b = tree(experiment / "out"), tree(tmp_path / "out")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_mode_change_reuses_preprocessing(experiment, tmp_path):
    shutil.copytree(experiment / "bundles", tmp_path / "bundles")
    (tmp_path / "exp.ini").write_text(CONFIG)
    assert main(["run", "--config", str(tmp_path / "exp.ini"),
                 "--mode", "one_to_one", "--tau", "0"]) == 0
    base, other = tree(experiment / "out" / "cache"), tree(tmp_path / "out" / "cache")
    assert base == other
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary["pooled"]["slot_accuracy"]) == {"0"}


def test_train_subcommand_matches_run(experiment, tmp_path):
    assert main(["train", "--config", str(experiment / "exp.ini"), "--fold", "0",
                 "--out-dir", str(tmp_path / "f0")]) == 0
    run_dir = experiment / "out" / "fold_00"
    assert (tmp_path / "f0" / "model.ssck").read_bytes() == (run_dir / "model.ssck").read_bytes()
    assert (tmp_path / "f0" / "history.csv").read_text() == (run_dir / "history.csv").read_text()


def test_predict_and_aggregate_reproduce_run(experiment, tmp_path):
    fold = experiment / "out" / "fold_00"
    subjects = sorted(p.stem for p in (fold / "grids").glob("*.sspg"))
    bundles = [str(experiment / "bundles" / s) for s in subjects]
    assert main(["predict", "--checkpoint", str(fold / "model.ssck"), "--bundle", *bundles,
                 "--out-dir", str(tmp_path / "grids")]) == 0
    for s in subjects:
        got = (tmp_path / "grids" / f"{s}.sspg").read_bytes()
        assert got == (fold / "grids" / f"{s}.sspg").read_bytes()
    grids = [str(tmp_path / "grids" / f"{s}.sspg") for s in subjects]
    assert main(["aggregate", "--grid", *grids, "--voting", "multiplicative",
                 "--out-dir", str(tmp_path / "hyp")]) == 0
    for s in subjects:
        got = (tmp_path / "hyp" / f"{s}.txt").read_text()
        assert got == (fold / "hypnograms" / f"{s}.txt").read_text()


def test_evaluate_subcommand(experiment, tmp_path, capsys):
    fold = experiment / "out" / "fold_00"
    subjects = sorted(p.stem for p in (fold / "hypnograms").glob("*.txt"))
    truth = [str(experiment / "bundles" / s) for s in subjects]
    pred = [str(fold / "hypnograms" / f"{s}.txt") for s in subjects]
    capsys.readouterr()
    assert main(["evaluate", "--truth", *truth, "--pred", *pred,
                 "--out", str(tmp_path / "rep")]) == 0
    printed = capsys.readouterr().out
    assert printed == (fold / "report.txt").read_text()
    assert (tmp_path / "rep.csv").read_text() == (fold / "report.csv").read_text()


def test_evaluate_count_mismatch(experiment, capsys):
    code = main(["evaluate", "--truth", str(experiment / "bundles" / "S000"),
                 "--pred", "a.txt", "b.txt"])
    assert code == 1 and capsys.readouterr().err.startswith("error: config:")


# ---------------------------------------------------------------------------
# rendering

TRUTH5 = [0, 1, 2, 3, 4]
PRED5 = [0, 2, 2, 3, 0]


def test_render_text_golden():
    assert render_text(TRUTH5, PRED5) == (GOLDEN / "hypnogram_5.txt").read_text()


def test_render_identical_tracks():
    text = render_text(TRUTH5, TRUTH5).splitlines()
    assert text[1:6] == text[7:12] and text[-1] == "agreement 5/5"
    svg = render_svg(TRUTH5, TRUTH5)
    tracks = [ln for ln in svg.splitlines() if ln.startswith("<polyline")]
    assert len(tracks) == 2


@pytest.mark.parametrize("truth, pred", [([], []), ([0, 1], [0])])
def test_render_rejects_bad_input(truth, pred, tmp_path, capsys):
    (tmp_path / "t.txt").write_text("".join(["W\n", "N1\n"][:len(truth)]))
    (tmp_path / "p.txt").write_text("W\n" * len(pred))
    code = main(["render-hypnogram", "--truth", str(tmp_path / "t.txt"),
                 "--pred", str(tmp_path / "p.txt"), "--out", str(tmp_path / "h")])
    assert code == 1 and capsys.readouterr().err.startswith("error: shape:")


def test_render_subcommand(tmp_path, capsys):
    (tmp_path / "t.txt").write_text("W\nN1\nN2\nN3\nREM\n")
    (tmp_path / "p.txt").write_text("W\nN2\nN2\nN3\nW\n")
    assert main(["render-hypnogram", "--truth", str(tmp_path / "t.txt"),
                 "--pred", str(tmp_path / "p.txt"), "--out", str(tmp_path / "h")]) == 0
    assert (tmp_path / "h.txt").read_text() == (GOLDEN / "hypnogram_5.txt").read_text()
    assert (tmp_path / "h.svg").read_text().startswith("<svg")


# ---------------------------------------------------------------------------
# errors and exit codes

def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.ini")]) == 1
    assert capsys.readouterr().err.startswith("error: config:")


def test_invalid_config_names_key(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(CONFIG.replace("tau = 1", "tau = -3"))
    assert main(["run", "--config", str(tmp_path / "c.ini")]) == 1
    assert "error: config: [model.tau]" in capsys.readouterr().err


def test_jobs_must_be_positive(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "c.ini"), "--jobs", "0"]) == 1
    assert capsys.readouterr().err.startswith("error: config:")


def test_corrupt_bundle_is_a_bundle_error(tmp_path, capsys):
    (tmp_path / "bundles" / "X").mkdir(parents=True)
    (tmp_path / "bundles" / "X" / "manifest.txt").write_text("nonsense\n")
    (tmp_path / "c.ini").write_text(CONFIG)
    assert main(["preprocess", "--config", str(tmp_path / "c.ini")]) == 1
    assert capsys.readouterr().err.startswith("error: bundle:")


def test_aggregate_corrupt_grid(tmp_path, capsys):
    (tmp_path / "g.sspg").write_bytes(b"garbage")
    assert main(["aggregate", "--grid", str(tmp_path / "g.sspg"),
                 "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: format:")


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_schema_subcommand(capsys):
    assert main(["schema"]) == 0
    out = capsys.readouterr().out
    assert "[training]" in out and "learning_rate = 0.0001" in out


def test_slot_accuracy_keys_follow_output_slots():
    # only the left-prediction slot (decision about the input's left neighbour) is right
    y = np.array([0, 1, 2, 3, 4, 2, 1])
    tau, n = 1, len(y)
    out = np.zeros((n, 3, 5))
    for i in range(n):
        for s in range(3):
            target = y[min(max(i + s - tau, 0), n - 1)]
            out[i, s] = np.eye(5)[target if s == 0 else (target + 1) % 5]
    grid = scatter_decisions(out, tau, n)
    correct = [int(np.sum(np.argmax(grid.probs[grid.present[:, j], j], axis=1)
                          == y[grid.present[:, j]])) for j in range(3)]
    count = grid.present.sum(axis=0)
    acc = pipeline._slot_accuracy(correct, count, tau)
    assert acc == {"-1": 1.0, "0": 0.0, "1": 0.0}
