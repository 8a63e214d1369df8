import json

import pytest

from batchformer.harness.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main

TINY = ["--set", "model.depth=1", "--set", "model.dim=16", "--set", "data.num_classes=2",
        "--set", "data.samples_per_class=20", "--set", "optim.epochs=2", "--set", "optim.warmup_epochs=0"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    assert main(["train", "--out", str(out), "--seed", "3"] + TINY) == EXIT_OK
    return out


def test_train_writes_outputs_and_applies_overrides(trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["model"]["depth"] == 1 and cfg["optim"]["epochs"] == 2
    assert (trained / "final.ckpt").exists()


def test_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"depth": 1, "dim": 16},
                                                 "data": {"num_classes": 2, "samples_per_class": 20},
                                                 "optim": {"epochs": 1, "warmup_epochs": 0}}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "config.json").read_text())["optim"]["epochs"] == 1


@pytest.mark.parametrize("mode", ["stripped", "minibatch_inference"])
def test_eval(trained, tmp_path, capsys, mode):
    assert main(["eval", "--checkpoint", str(trained / "final.ckpt"), "--mode", mode, "--out", str(tmp_path)]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["mode"] == mode and 0 <= rec["accuracy"] <= 100
    assert json.loads((tmp_path / "eval.jsonl").read_text()) == rec


def test_eval_of_stripped_checkpoint_matches_full(trained, capsys):
    main(["eval", "--checkpoint", str(trained / "final.ckpt")])
    full = json.loads(capsys.readouterr().out.strip())
    main(["eval", "--checkpoint", str(trained / "final_stripped.ckpt")])
    assert json.loads(capsys.readouterr().out.strip()) == full


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "optim.learning_rate=1"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--set", "model.dim=30"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{")
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as err:
        main(["ablate", "--out", str(tmp_path), "--axis", "depth"])
    assert err.value.code == 2


def test_data_errors_exit_3(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_DATA
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == EXIT_DATA
    (tmp_path / "img").write_bytes(b"\x00\x00\x08\x03\x00")
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "data.kind=idx-files",
                 "--set", f"data.train_images={tmp_path / 'img'}",
                 "--set", f"data.train_labels={tmp_path / 'img'}"]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_exit_4(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path)] + TINY +
                ["--set", "optim.algorithm=sgd", "--set", "optim.lr=1e30", "--set", "optim.cosine=false"])
    assert code == EXIT_DIVERGED
    assert "non-finite" in capsys.readouterr().err


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "ops", "--trials", "2", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "gradcheck.txt").read_text().splitlines()
    assert lines and all(l.startswith("PASS") for l in lines if l.split()[0] in ("PASS", "FAIL"))
