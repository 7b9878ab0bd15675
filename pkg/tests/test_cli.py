import json

import numpy as np
import pytest

from editable.cli import main
from editable.data_io import load_model_checkpoint, save_matrix
from editable.models import predict

SMALL = {
    "seed": 0,
    "model": {"hidden_dims": [16], "dtype": "float64"},
    "data": {"num_classes": 4, "per_class": 50, "dim": 5, "spread": 0.8, "train_size": 150},
    "train": {"epochs": 6, "batch_size": 32, "c_edit": 0.01, "c_loc": 0.01},
    "editor": {"variant": "rprop", "alpha": 0.02, "k": 10},
    "eval": {"n_edits": 20, "tune_edits": 20,
             "tune_grid": {"variant": ["gd", "rprop"], "alpha": [1e-6, 0.02]}},
}


def write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root, SMALL)
    assert main(["train", "--config", cfg, "--out", str(root / "model.ednn")]) == 0
    return root, cfg, root / "model.ednn"


def test_train_writes_checkpoint_and_metrics(trained):
    root, _, ckpt = trained
    assert ckpt.is_file()
    lines = (root / "model.ednn.metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6 * 5
    assert json.loads(lines[0])["step"] == 0
    loaded = load_model_checkpoint(ckpt)
    assert loaded.model.input_dim == 5 and loaded.run["seed"] == 0


def test_train_is_byte_reproducible(trained, tmp_path):
    _, cfg, ckpt = trained
    again = tmp_path / "again.ednn"
    assert main(["train", "--config", cfg, "--out", str(again)]) == 0
    assert again.read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "again.ednn.metrics.jsonl").read_bytes() == \
        (ckpt.parent / "model.ednn.metrics.jsonl").read_bytes()


def test_train_config_errors(tmp_path):
    bad = dict(SMALL, train={**SMALL["train"], "learning_rate": 1})
    assert main(["train", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", write_config(tmp_path, {**SMALL, "extra": 1}, "b.json"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path):
    doc = dict(SMALL, train={**SMALL["train"], "lr": 1e300, "c_edit": 0, "c_loc": 0, "epochs": 3})
    assert main(["train", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "d.ednn")]) == 3


def test_outputs_are_write_once(trained):
    _, cfg, ckpt = trained
    before = ckpt.read_bytes()
    assert main(["train", "--config", cfg, "--out", str(ckpt)]) == 2
    assert ckpt.read_bytes() == before


def test_eval_edits_report(trained, tmp_path):
    _, cfg, ckpt = trained
    report = tmp_path / "r.json"
    assert main(["eval-edits", "--ckpt", str(ckpt), "--config", cfg, "--n", "12", "--editor", "rprop",
                 "--layers", "head", "--report", str(report), "--descriptors", str(tmp_path / "d.eddm")]) == 0
    doc = json.loads(report.read_text())
    assert doc["n_edits"] == 12 and len(doc["per_edit"]) == 12
    assert doc["editable_groups"] == ["head"]
    assert (tmp_path / "d.eddm").is_file()


def test_eval_edits_k_zero_and_workers(trained, tmp_path):
    _, cfg, ckpt = trained
    r0 = tmp_path / "k0.json"
    assert main(["eval-edits", "--ckpt", str(ckpt), "--config", cfg, "--editor", "gd", "--k", "0",
                 "--report", str(r0)]) == 0
    assert json.loads(r0.read_text())["mean_drawdown"] == 0
    r1, r4 = tmp_path / "w1.json", tmp_path / "w4.json"
    common = ["eval-edits", "--ckpt", str(ckpt), "--config", cfg, "--editor", "checkpoint"]
    assert main(common + ["--report", str(r1), "--workers", "1"]) == 0
    assert main(common + ["--report", str(r4), "--workers", "4"]) == 0
    assert r1.read_bytes() == r4.read_bytes()


def test_eval_edits_missing_checkpoint(trained, tmp_path):
    _, cfg, _ = trained
    assert main(["eval-edits", "--ckpt", str(tmp_path / "nope"), "--config", cfg,
                 "--editor", "gd", "--report", str(tmp_path / "r.json")]) == 2


def test_edit_command(trained, tmp_path, capsys):
    _, _, ckpt = trained
    model = load_model_checkpoint(ckpt)
    x = np.linspace(-1, 1, 5)
    pred = int(predict(model.model, model.params, x[None])[0])
    vec = tmp_path / "x.txt"
    vec.write_text(" ".join(repr(float(v)) for v in x))

    assert main(["edit", "--ckpt", str(ckpt), "--input", str(vec), "--target", str(pred),
                 "--out", str(tmp_path / "same.ednn")]) == 0
    assert json.loads(capsys.readouterr().out)["steps_taken"] == 0

    target = (pred + 1) % 4
    out = tmp_path / "edited.ednn"
    assert main(["edit", "--ckpt", str(ckpt), "--input", str(vec), "--target", str(target),
                 "--out", str(out)]) == 0
    trace = json.loads(capsys.readouterr().out)
    assert trace["satisfied"]
    edited = load_model_checkpoint(out)
    assert int(predict(edited.model, edited.params, x[None])[0]) == target

    failed = tmp_path / "failed.ednn"
    assert main(["edit", "--ckpt", str(ckpt), "--input", str(vec), "--target", str(target),
                 "--out", str(failed), "--k", "0"]) == 4
    assert json.loads(capsys.readouterr().out)["satisfied"] is False
    assert not failed.exists()


def test_edit_bad_input(trained, tmp_path):
    _, _, ckpt = trained
    vec = tmp_path / "x.txt"
    vec.write_text("1 2 3")
    assert main(["edit", "--ckpt", str(ckpt), "--input", str(vec), "--target", "0",
                 "--out", str(tmp_path / "o.ednn")]) == 2


def test_tune_command(trained, tmp_path):
    root, _, ckpt = trained
    report = tmp_path / "best.json"
    cfg = write_config(tmp_path, SMALL)
    assert main(["tune", "--ckpt", str(ckpt), "--config", cfg, "--report", str(report)]) == 0
    best = json.loads(report.read_text())
    assert best["alpha"] == 0.02
    # the tuned file feeds straight back into eval-edits
    assert main(["eval-edits", "--ckpt", str(ckpt), "--config", cfg, "--editor", str(report),
                 "--report", str(tmp_path / "r.json")]) == 0

    single = dict(SMALL, eval={**SMALL["eval"], "tune_grid": {"alpha": [0.02]}})
    one = tmp_path / "one.json"
    assert main(["tune", "--ckpt", str(ckpt), "--config", write_config(tmp_path, single, "s.json"),
                 "--report", str(one)]) == 0
    assert json.loads(one.read_text())["alpha"] == 0.02

    infeasible = dict(SMALL, eval={**SMALL["eval"], "tune_grid": {"alpha": [1e-9]}})
    assert main(["tune", "--ckpt", str(ckpt), "--config", write_config(tmp_path, infeasible, "i.json"),
                 "--report", str(tmp_path / "none.json")]) == 5


def test_analyze_command(tmp_path):
    rank1 = tmp_path / "r1.eddm"
    save_matrix(rank1, np.outer([1.0, 2.0, 4.0], [1.0, 0.5, 0.25, 2.0]))
    out = tmp_path / "ev.json"
    assert main(["analyze", "--descriptors", str(rank1), "--report", str(out)]) == 0
    assert json.loads(out.read_text())["explained_variance"] == pytest.approx([1.0])
    zeros = tmp_path / "z.eddm"
    save_matrix(zeros, np.zeros((3, 4)))
    assert main(["analyze", "--descriptors", str(zeros), "--report", str(tmp_path / "z.json")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["train"]) == 2
