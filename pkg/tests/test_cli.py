import json

import pytest

from mcnn.cli import main, read_config
from mcnn.data import load_dataset
from mcnn.evaluation import bidirectional_reports, build_score_matrix
from mcnn.training import load_checkpoint

TRAIN = ["--preset", "toy", "--max-epochs", "2", "--batch-size", "10", "--learning-rate", "0.1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--images", "40", "--concepts", "4", "--seed", "7",
                 "--split", "24,8,8", "--out", str(root / "toy")]) == 0
    for v in ("wd", "phs", "phl", "st"):
        assert main(["train", "--variant", v, "--data", str(root / "toy"),
                     "--out", str(root / "ck" / f"{v}.mcnn"), *TRAIN]) == 0
    return root


def ckpts(root, names=("wd", "phs", "phl", "st")):
    return [str(root / "ck" / f"{n}.mcnn") for n in names]


# ---------------------------------------------------------------- make-toy

def test_make_toy_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["make-toy", "--images", "30", "--concepts", "8", "--seed", "7",
                     "--vocab-size", "60", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 4
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "wrote 4 files" in capsys.readouterr().out


def test_make_toy_requires_images(capsys):
    assert main(["make-toy"]) == 1
    assert "--images" in capsys.readouterr().err


def test_make_toy_bad_sizes_is_usage_error(tmp_path):
    assert main(["make-toy", "--images", "3", "--concepts", "8", "--out", str(tmp_path)]) == 1


def test_unknown_command():
    assert main(["frobnicate"]) == 1


# ---------------------------------------------------------------- config

def test_config_file_values_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy data\nimages = 30\nconcepts = 4  # inline\nvocab_size = 40\n")
    out = tmp_path / "d"
    assert main(["make-toy", "--config", str(cfg), "--concepts", "5", "--out", str(out), "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["images"] == 30
    assert len(json.loads((out / "images.json").read_text())["concepts"]) == 30
    assert max(max(c) for c in json.loads((out / "images.json").read_text())["concepts"].values()) <= 4


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("images = 10\nfoo = 1\n")
    assert main(["make-toy", "--config", str(cfg)]) == 1
    assert "foo" in capsys.readouterr().err


def test_config_bad_line(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("images 10\n")
    assert main(["make-toy", "--config", str(cfg)]) == 1


def test_read_config_normalizes_keys(tmp_path):
    cfg = tmp_path / "c"
    cfg.write_text("learning_rate = 0.1\n\nmax-epochs=3\n")
    assert read_config(cfg) == {"learning-rate": "0.1", "max-epochs": "3"}


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_single_variant(capsys):
    assert main(["gradcheck", "--variant", "wd", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("wd") and "PASS" in out and "phs" not in out


def test_gradcheck_unreachable_tolerance(capsys, tmp_path):
    rep = tmp_path / "gc.json"
    assert main(["gradcheck", "--variant", "st", "--seeds", "1", "--tolerance", "1e-12",
                 "--out", str(rep)]) == 3
    out = capsys.readouterr().out
    assert "FAIL" in out and "conv1.w" in out
    assert json.loads(rep.read_text())["passed"] is False


# ---------------------------------------------------------------- train

def test_train_outputs(workspace):
    log = (workspace / "ck" / "st.log.jsonl").read_text().splitlines()
    first, last = json.loads(log[0]), json.loads(log[-1])
    assert first["resolved_config"]["architecture"]["variant"] == "st"
    assert first["resolved_config"]["train_config"]["max_epochs"] == 2
    assert "val_r1" in last["final"]
    assert len(log) == 4


def test_train_is_deterministic(workspace, tmp_path):
    out = tmp_path / "again.mcnn"
    assert main(["train", "--variant", "wd", "--data", str(workspace / "toy"), "--out", str(out),
                 "--log", str(workspace / "ck" / "wd.log.jsonl.copy"), *TRAIN]) == 0
    assert out.read_bytes() == (workspace / "ck" / "wd.mcnn").read_bytes()


def test_train_feature_dim_conflict(workspace, tmp_path):
    out = tmp_path / "x.mcnn"
    assert main(["train", "--variant", "wd", "--data", str(workspace / "toy"), "--out", str(out),
                 "--feature-dim", "32", *TRAIN]) == 2
    assert not out.exists() and not out.with_suffix(".log.jsonl").exists()


def test_train_missing_data(tmp_path):
    assert main(["train", "--variant", "wd", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "x.mcnn")]) == 2


def test_train_embedding_dim_conflict(workspace, tmp_path):
    emb = tmp_path / "e.txt"
    emb.write_text("w000 1 2 3\n")
    assert main(["train", "--variant", "wd", "--data", str(workspace / "toy"),
                 "--out", str(tmp_path / "x.mcnn"), "--embeddings", str(emb), *TRAIN]) == 2


# ---------------------------------------------------------------- eval

def test_eval_ensemble_report_pair(workspace, tmp_path, capsys):
    assert main(["eval", "--ckpt", *ckpts(workspace), "--data", str(workspace / "toy"),
                 "--ensemble", "--out", str(tmp_path), "--json"]) == 0
    reports = json.loads(capsys.readouterr().out)
    assert len(reports) == 2 and all(r["ensemble"] for r in reports)
    assert {r["direction"] for r in reports} == {"sentence_retrieval", "image_retrieval"}
    assert (tmp_path / "ensemble.image_retrieval.json").exists()


def test_eval_single_matches_library(workspace, capsys):
    path = ckpts(workspace, ["phl"])[0]
    assert main(["eval", "--ckpt", path, "--data", str(workspace / "toy"), "--json"]) == 0
    reports = json.loads(capsys.readouterr().out)
    model = load_checkpoint(path)
    view = load_dataset(workspace / "toy", vocab=model.vocab).view("test")
    matrix = build_score_matrix([model], view.features, view.sentences, view.owner)
    for got, want in zip(reports, bidirectional_reports(matrix)):
        assert got == json.loads(json.dumps(want.to_json(path, False)))


def test_eval_without_ensemble_reports_each(workspace, capsys):
    assert main(["eval", "--ckpt", *ckpts(workspace, ["wd", "st"]), "--data", str(workspace / "toy"),
                 "--json"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 4


def test_eval_too_many_checkpoints(workspace):
    assert main(["eval", "--ckpt", *ckpts(workspace), ckpts(workspace)[0],
                 "--data", str(workspace / "toy")]) == 1


def test_eval_vocab_mismatch(workspace, tmp_path, capsys):
    assert main(["make-toy", "--images", "30", "--concepts", "4", "--seed", "99",
                 "--out", str(tmp_path / "other")]) == 0
    other = tmp_path / "other.mcnn"
    assert main(["train", "--variant", "wd", "--data", str(tmp_path / "other"), "--out", str(other),
                 *TRAIN]) == 0
    capsys.readouterr()
    assert main(["eval", "--ckpt", ckpts(workspace)[0], str(other), "--ensemble",
                 "--data", str(workspace / "toy")]) == 2
    assert "vocabular" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(workspace, tmp_path):
    bad = tmp_path / "bad.mcnn"
    bad.write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(bad), "--data", str(workspace / "toy")]) == 2


# ---------------------------------------------------------------- score

def test_score_known_pair(workspace, capsys):
    ds = load_dataset(workspace / "toy")
    image_id, tokens = ds.captions[0]
    assert main(["score", "--ckpt", ckpts(workspace)[0], "--data", str(workspace / "toy"),
                 "--image", image_id, "--sentence", " ".join(tokens)]) == 0
    out = capsys.readouterr().out.strip()
    float(out)
    assert "\n" not in out


def test_score_json(workspace, capsys):
    assert main(["score", "--ckpt", ckpts(workspace)[0], "--data", str(workspace / "toy"),
                 "--image", "img00001", "--sentence", "A w001", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert set(data) == {"image_id", "sentence", "score"} and data["sentence"] == "a w001"


def test_score_unknown_image_lists_nearest(workspace, capsys):
    assert main(["score", "--ckpt", ckpts(workspace)[0], "--data", str(workspace / "toy"),
                 "--image", "img0001", "--sentence", "a"]) == 1
    assert "img0001" in capsys.readouterr().err


# ---------------------------------------------------------------- probe

def test_probe_table_and_determinism(workspace, tmp_path, capsys):
    args = ["probe-reshuffle", "--ckpt", *ckpts(workspace), "--data", str(workspace / "toy"),
            "--n", "3", "--seed", "1", "--limit", "5"]
    assert main([*args, "--out", str(tmp_path / "a.json")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split("\t") == ["image", "sentence", "wd", "phs", "phl", "st"]
    assert main([*args, "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["n_shuffles"] == 3


def test_probe_zero_shuffles(workspace):
    assert main(["probe-reshuffle", "--ckpt", ckpts(workspace)[0], "--data", str(workspace / "toy"),
                 "--n", "0"]) == 1


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "mcnn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "probe-reshuffle" in res.stdout
