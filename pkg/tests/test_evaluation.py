import json
import statistics
import sys

import numpy as np
import pytest

from objstyle import datasets, evaluation
from objstyle.exceptions import ScorerUnavailable, ShapeMismatch
from objstyle.image_io import load_image

from .oracles import ssim_oracle

ECHO = "import json, sys\njson.load(sys.stdin)\nprint(json.dumps({'score': 5.0}))\n"


@pytest.fixture
def registry(tmp_path):
    script = tmp_path / "echo.py"
    script.write_text(ECHO)
    reg = {"echo": {"command": [sys.executable, str(script)], "needs_reference": False},
           "ref": {"command": [sys.executable, str(script)], "needs_reference": True},
           "ghost": {"command": [str(tmp_path / "no-such-binary")]}}
    path = tmp_path / "scorers.json"
    path.write_text(json.dumps(reg))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    datasets.write_corpus(root, n=3, size=48)
    return root


def test_structure_score_examples(rng):
    img = rng.random((48, 48, 3))
    assert evaluation.structure_score(img, img) == pytest.approx(1.0, abs=1e-12)
    flat = np.full((40, 40, 3), 0.4)
    assert evaluation.structure_score(flat, flat) == pytest.approx(1.0, abs=1e-12)
    inv = evaluation.structure_score(1 - img, img)
    assert inv < 0.5
    assert inv == pytest.approx(ssim_oracle(evaluation.luminance(1 - img), evaluation.luminance(img)), abs=1e-9)
    with pytest.raises(ShapeMismatch):
        evaluation.structure_score(img, img[:40])


def test_structure_score_matches_windowed_oracle(rng):
    a = rng.random((40, 44, 3))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    expect = ssim_oracle(evaluation.luminance(a), evaluation.luminance(b))
    assert evaluation.structure_score(b, a) == pytest.approx(expect, abs=1e-9)


def test_style_gram_distance_properties(extractor):
    inst = datasets.make_instance("stp_e", size=48)
    c, s = inst["content"], inst["style"]
    assert evaluation.style_gram_distance(s, s, extractor=extractor) == 0.0
    d_cs = evaluation.style_gram_distance(c, s, extractor=extractor)
    d_sc = evaluation.style_gram_distance(s, c, extractor=extractor)
    assert d_cs > 0 and d_cs == pytest.approx(d_sc, rel=1e-12)
    # blend endpoints: alpha=1 (pure style) is no farther from the style than alpha=0
    assert evaluation.style_gram_distance(1.0 * s + 0.0 * c, s, extractor=extractor) <= d_cs


def test_echo_plugin_and_missing_plugins(registry, rng):
    reg = evaluation.load_registry(registry)
    img = rng.random((32, 32, 3))
    assert evaluation.external_score(img, scorer="echo", registry=reg) == (5.0, "plugin:echo")
    assert evaluation.external_score(img, img, scorer="ref", registry=reg)[0] == 5.0
    for name in ("nima", "ghost"):
        with pytest.raises(ScorerUnavailable):
            evaluation.external_score(img, scorer=name, registry=reg)
    with pytest.raises(ScorerUnavailable):
        evaluation.external_score(img, scorer="ref", registry=reg)   # needs a reference
    assert evaluation.load_registry() == {}


def test_bad_plugin_output_is_unavailable(tmp_path, rng):
    bad = tmp_path / "bad.py"
    bad.write_text("print('not json')\n")
    reg = {"bad": {"command": [sys.executable, str(bad)]}}
    with pytest.raises(ScorerUnavailable):
        evaluation.external_score(rng.random((32, 32, 3)), scorer="bad", registry=reg)


def test_scan_corpus_errors(tmp_path):
    with pytest.raises(evaluation.CorpusError):
        evaluation.scan_corpus(tmp_path / "missing")
    with pytest.raises(evaluation.CorpusError):
        evaluation.scan_corpus(tmp_path)
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "content.png").write_bytes(b"")
    with pytest.raises(evaluation.CorpusError, match="style.png"):
        evaluation.scan_corpus(tmp_path)


def test_corpus_rows_null_for_missing_scorers(corpus, registry, monkeypatch):
    monkeypatch.setenv(evaluation.SCORERS_ENV, str(registry))
    rows = evaluation.evaluate_corpus(corpus, ["echo", "nima"], vgg_weights="random")
    assert [r["id"] for r in rows] == ["scene_00", "scene_01", "scene_02"]
    for r in rows:
        assert r["external"] == {"echo": 5.0, "nima": None}
        assert r["votes"] is None and r["final_losses"] is None
        assert np.isfinite(r["structure_score"]) and r["style_gram_distance"] > 0
    agg = evaluation.aggregate(rows)
    assert agg["external.nima"] == {"mean": None, "median": None, "count": 0, "null": 3}
    assert agg["external.echo"]["mean"] == 5.0


def test_parallel_matches_serial(corpus):
    serial = evaluation.evaluate_corpus(corpus, vgg_weights="random")
    parallel = evaluation.evaluate_corpus(corpus, vgg_weights="random", jobs=2)
    assert serial == parallel


def test_final_losses_from_history(corpus, tmp_path):
    import shutil
    d = tmp_path / "one"
    shutil.copytree(corpus / "scene_00", d)
    (d / "history.jsonl").write_text(json.dumps({"iteration": 1, "total": 3.0, "elapsed_ms": 1}) + "\n"
                                     + json.dumps({"iteration": 2, "total": 2.0, "elapsed_ms": 2}) + "\n")
    row = evaluation.evaluate_instance(d, vgg_weights="random")
    assert row["final_losses"] == {"total": 2.0}


def test_aggregate_recomputable():
    rows = [{"id": str(i), "structure_score": s, "style_gram_distance": g, "external": {"x": x}}
            for i, (s, g, x) in enumerate([(0.9, 1.0, None), (0.5, 3.0, 2.0), (0.7, 2.5, 4.0)])]
    agg = evaluation.aggregate(rows)
    assert abs(agg["structure_score"]["mean"] - statistics.fmean([0.9, 0.5, 0.7])) <= 1e-12
    assert agg["style_gram_distance"]["median"] == 2.5
    assert agg["external.x"] == {"mean": 3.0, "median": 3.0, "count": 2, "null": 1}
    one = evaluation.aggregate(rows[1:2])
    assert one["structure_score"]["mean"] == 0.5 and one["external.x"]["median"] == 2.0


def test_emit_report_deterministic(tmp_path):
    rows = [{"id": "a", "structure_score": 0.8, "style_gram_distance": 1.5, "final_losses": None,
             "external": {"nima": None}, "votes": None},
            {"id": "b", "structure_score": 0.6, "style_gram_distance": 2.5, "final_losses": None,
             "external": {"nima": 4.0}, "votes": None}]
    first = evaluation.emit_report(rows, tmp_path / "r1.json", {"nima": None})
    second = evaluation.emit_report(rows, tmp_path / "r2.json", {"nima": None})
    assert len(first) == 4    # report + 3 plots
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    r1, r2 = (json.loads(p.read_text()) for p in (first[0], second[0]))
    assert r1 == r2 and len(r1["rows"]) == 2
    assert r1["footnotes"]["reference_averages"]["nima"]["deepobjstyle"] == 5.49
    assert r1["footnotes"]["reference_averages"]["pieapp"]["deepobjstyle"] == 2.83
    assert r1["aggregate"]["external.nima"]["count"] == 1
    with pytest.raises(ValueError):
        evaluation.emit_report([], tmp_path / "r3.json")


def test_bundled_corpus_layout():
    entries = evaluation.scan_corpus(datasets.corpus_dir())
    assert len(entries) == 5
    for d in entries:
        assert load_image(d / "output.png").shape == (64, 64, 3)
