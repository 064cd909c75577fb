import json

import numpy as np
import pytest

from bridgeseg.cli import build_parser, run

TINY = {"epochs": 1, "n_res_blocks": 1, "gen_base_channels": 4, "disc_base_channels": 4,
        "seg_base_channels": 4, "seg_depth": 2, "nce_patches": 16}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert run(["gen-data", "--seed", "7", "--subjects", "4", "--test-subjects", "2",
                "--slices", "2", "--size", "32", "--out", str(root / "d")]) == 0
    assert run(["train", "--data", str(root / "d/train"), "--config", str(cfg),
                "--mode", "e2e", "--out", str(root / "run")]) == 0
    return root


def test_gen_data(tmp_path):
    assert run(["gen-data", "--seed", "7", "--subjects", "4", "--out", str(tmp_path),
                "--split", "test", "--slices", "1"]) == 0
    assert (tmp_path / "manifest.json").is_file()
    assert len(list(tmp_path.glob("*.f32"))) == 8 and len(list(tmp_path.glob("*.u8"))) == 4


def test_gen_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        run(["gen-data", "--seed", "3", "--subjects", "2", "--slices", "1",
             "--out", str(tmp_path / d)])
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_train_then_evaluate(pipeline, tmp_path, capsys):
    ck = pipeline / "run/checkpoint_e001.ckpt"
    assert ck.is_file() and (pipeline / "run/loss.csv").is_file()
    exp = json.loads((pipeline / "run/experiment.json").read_text())
    assert exp["config"]["mode"] == "E2E" and exp["config"]["n_res_blocks"] == 1
    assert run(["evaluate", "--checkpoint", str(ck), "--data", str(pipeline / "d/test"),
                "--out", str(tmp_path / "ev"), "--passes", "3"]) == 0
    assert (tmp_path / "ev/metrics.csv").is_file() and (tmp_path / "ev/summary.json").is_file()
    assert "evaluate:" in capsys.readouterr().out
    run(["evaluate", "--checkpoint", str(ck), "--data", str(pipeline / "d/test"),
         "--out", str(tmp_path / "ev2"), "--passes", "3"])
    assert (tmp_path / "ev/metrics.csv").read_bytes() == (tmp_path / "ev2/metrics.csv").read_bytes()
    assert run(["report", "--metrics", f"a={tmp_path / 'ev/metrics.csv'}",
                f"b={tmp_path / 'ev2/metrics.csv'}", "--out", str(tmp_path / "rep")]) == 0
    assert json.loads((tmp_path / "rep/report.json").read_text())["variants"]["a"]["n"] == 4


def test_flags_override_config(pipeline, tmp_path):
    cfg = pipeline / "c2.json"
    cfg.write_text(json.dumps(dict(TINY, mode="E2E", seed=1)))
    assert run(["train", "--data", str(pipeline / "d/train"), "--config", str(cfg),
                "--mode", "two_stage", "--seed", "5", "--out", str(tmp_path / "r")]) == 0
    exp = json.loads((tmp_path / "r/experiment.json").read_text())
    assert exp["config"]["mode"] == "TWO_STAGE" and exp["config"]["seed"] == 5
    assert (tmp_path / "r/translation_loss.csv").is_file()


def test_segment_and_translate(pipeline, tmp_path):
    ck = str(pipeline / "run/checkpoint_e001.ckpt")
    assert run(["segment", "--checkpoint", ck, "--data", str(pipeline / "d/test"),
                "--out", str(tmp_path / "s"), "--passes", "3"]) == 0
    var = np.fromfile(tmp_path / "s/test000_0_var.f32", dtype="<f4")
    assert var.size == 32 * 32 and var.min() >= 0
    from PIL import Image
    png = Image.open(tmp_path / "s/test000_0_var.png")
    assert png.mode in ("RGB", "RGBA") and png.size == (32, 32)
    assert run(["translate", "--checkpoint", ck, "--data", str(pipeline / "d/test"),
                "--out", str(tmp_path / "t")]) == 0
    from bridgeseg.phantom import load_dataset
    slices, _, _ = load_dataset(tmp_path / "t")
    assert len(slices) == 4 and all(s.domain.value == "SYNTH_CT" for s in slices)


def test_evaluate_without_masks_fails(pipeline, tmp_path, capsys):
    ck = str(pipeline / "run/checkpoint_e001.ckpt")
    code = run(["evaluate", "--checkpoint", ck, "--data", str(pipeline / "d/train"),
                "--out", str(tmp_path / "e")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 1 and err["error"] == "FormatError" and "_CT.f32" in err["message"]


@pytest.mark.parametrize("argv", [["bogus"], [], ["train", "--out", "x"],
                                  ["gen-data", "--out", "x", "--undocumented", "1"],
                                  ["gen-data", "--out", "x", "--subj", "3"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2
    assert "error" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert run(["evaluate", "--checkpoint", str(tmp_path / "no.ckpt"), "--data",
                str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
