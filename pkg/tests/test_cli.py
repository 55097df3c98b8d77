import json
import sys

import numpy as np
import pytest

from objstyle import datasets
from objstyle.cli import main
from objstyle.image_io import load_image, save_image

FAST = ["--vgg-weights", "random", "--max-side", "32"]


def inst_args(name):
    d = datasets.smoke_dir(name)
    args = ["--content", str(d / "content.png"), "--style", str(d / "style.png"),
            "--content-mask", str(d / "content_mask.png"), "--style-mask", str(d / "style_mask.png")]
    if (d / "object_map.json").is_file():
        args += ["--object-map", str(d / "object_map.json")]
    return args


def test_missing_style_is_usage_error(tmp_path, capsys):
    d = datasets.smoke_dir("stp_e")
    code = main(["run", "--content", str(d / "content.png"), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "style" in capsys.readouterr().err


def test_nonexistent_file_names_flag(tmp_path, capsys):
    args = inst_args("stp_e")
    args[3] = str(tmp_path / "nope.png")
    assert main(["run", *args, "--out-dir", str(tmp_path / "o"), *FAST]) == 2
    assert "--style" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterationz": 3}))
    assert main(["run", *inst_args("stp_e"), "--out-dir", str(tmp_path / "o"), "--config", str(cfg), *FAST]) == 2
    assert "--config" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert main(["run", *inst_args("stp_e"), "--out-dir", str(tmp_path / "o"), "--config", str(cfg), *FAST]) == 2


def test_masks_must_come_together(tmp_path):
    args = inst_args("stp_e")[:6]
    assert main(["run", *args, "--out-dir", str(tmp_path), *FAST]) == 2


def test_runtime_error_is_exit_1(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OBJSTYLE_VGG_WEIGHTS", str(tmp_path / "missing.pth"))
    args = inst_args("stp_e")
    assert main(["losses", *args, "--candidate", args[1], "--max-side", "32"]) == 1
    assert "WeightsUnavailable" in capsys.readouterr().err


def test_minimal_run_with_checkpoints(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", *inst_args("stp_c"), "--out-dir", str(out), "--iterations", "1",
                 "--checkpoint-every", "1", *FAST])
    assert code == 0
    assert (out / "output.png").is_file()
    assert sorted(p.name for p in out.glob("step_*.png")) == ["step_1.png"]
    assert len((out / "history.jsonl").read_text().splitlines()) == 1
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["iterations"] == 1 and cfg["max_side"] == 32
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 1


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 5, "seed": 3, "weights": {"beta1": 0.5}}))
    out = tmp_path / "out"
    assert main(["run", *inst_args("stp_e"), "--out-dir", str(out), "--config", str(cfg),
                 "--iterations", "2", *FAST]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["iterations"] == 2 and saved["seed"] == 3 and saved["weights"]["beta1"] == 0.5


def test_losses_keys_and_content_zero(tmp_path, capsys):
    d = datasets.smoke_dir("stp_e")
    assert main(["losses", *inst_args("stp_e"), "--candidate", str(d / "content.png"), *FAST]) == 0
    br = json.loads(capsys.readouterr().out)
    assert set(br) == {"dps_style", "dps_content", "photorealism", "ctx_content", "total"}
    assert br["dps_content"] == 0.0

    c = datasets.smoke_dir("stp_c")
    assert main(["losses", *inst_args("stp_c"), "--candidate", str(c / "style.png"), *FAST]) == 0
    br = json.loads(capsys.readouterr().out)
    assert set(br) == {"dps_style", "dps_content", "photorealism", "ctx_content", "gram_unmapped",
                       "ctx_unmapped", "total"}


@pytest.mark.parametrize("name", ["stp_e", "stp_s"])
def test_losses_reproduces_last_logged_breakdown(tmp_path, capsys, name):
    out = tmp_path / "out"
    assert main(["run", *inst_args(name), "--out-dir", str(out), "--iterations", "3", *FAST]) == 0
    capsys.readouterr()
    last = json.loads((out / "history.jsonl").read_text().splitlines()[-1])
    assert main(["losses", *inst_args(name), "--candidate", str(out / "output.png"), *FAST]) == 0
    br = json.loads(capsys.readouterr().out)
    for k, v in br.items():
        assert abs(v - last[k]) <= 1e-6 * max(1.0, abs(v)), k


def test_run_without_masks(tmp_path, rng):
    save_image(rng.random((40, 40, 3)), tmp_path / "c.png")
    save_image(rng.random((40, 48, 3)), tmp_path / "s.png")
    assert main(["run", "--content", str(tmp_path / "c.png"), "--style", str(tmp_path / "s.png"),
                 "--out-dir", str(tmp_path / "o"), "--iterations", "1", "--vgg-weights", "random"]) == 0
    assert load_image(tmp_path / "o" / "output.png").shape == (40, 40, 3)


def test_eval_empty_corpus_is_usage_error(tmp_path):
    assert main(["eval", "--corpus", str(tmp_path), "--out", str(tmp_path / "r.json")]) == 2


def test_eval_report(tmp_path, capsys, monkeypatch):
    corpus = tmp_path / "corpus"
    datasets.write_corpus(corpus, n=2, size=48)
    # one triple whose output is its content: structure score at its maximum
    ident = corpus / "ident"
    ident.mkdir()
    for f in ("content.png", "style.png"):
        (ident / f).write_bytes((corpus / "scene_00" / f).read_bytes())
    (ident / "output.png").write_bytes((corpus / "scene_00" / "content.png").read_bytes())

    echo = tmp_path / "echo.py"
    echo.write_text("import json, sys\njson.load(sys.stdin)\nprint(json.dumps({'score': 5.0}))\n")
    reg = tmp_path / "scorers.json"
    reg.write_text(json.dumps({"echo": {"command": [sys.executable, str(echo)]}}))
    monkeypatch.setenv("OBJSTYLE_SCORERS", str(reg))

    out = tmp_path / "report.json"
    assert main(["eval", "--corpus", str(corpus), "--out", str(out), "--scorer", "echo", "--scorer", "nima",
                 "--vgg-weights", "random"]) == 0
    report = json.loads(out.read_text())
    assert len(report["rows"]) == 3 and "aggregate" in report
    rows = {r["id"]: r for r in report["rows"]}
    assert rows["ident"]["structure_score"] == pytest.approx(1.0, abs=1e-12)
    assert all(r["external"]["nima"] is None and r["external"]["echo"] == 5.0 for r in rows.values())
    assert report["scorers"] == {"echo": "plugin:echo", "nima": None}
    assert (tmp_path / "report_structure_score.png").is_file()
    assert np.isfinite(report["aggregate"]["style_gram_distance"]["mean"])
