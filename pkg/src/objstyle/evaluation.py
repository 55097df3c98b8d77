"""Desk-scale evaluation: local proxies, external scorer plugins and reports.

Local metrics are always available:

* ``structure_score``: mean SSIM of output vs content luminance.
* ``style_gram_distance``: gram distance of output vs style features.

Learned quality predictors run as external plugin processes. A plugin reads
``{"image": path, "reference": path?}`` as JSON on stdin and writes
``{"score": float}`` on stdout. Plugins are listed in a JSON registry named by
``OBJSTYLE_SCORERS``::

    {"nima": {"command": ["python", "nima_plugin.py"], "needs_reference": false}}

When a plugin is missing or fails, its cell is ``null``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import statistics
import subprocess
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from skimage.metrics import structural_similarity

from . import image_io
from .exceptions import ScorerUnavailable, ShapeMismatch
from .features import extract, get_extractor
from .losses import STYLE_LAYERS, gram_distance, masked_gram
from .validation import check_image

logger = logging.getLogger(__name__)

SCORERS_ENV = "OBJSTYLE_SCORERS"
CORPUS_FILES = ("content.png", "style.png", "output.png")

# Published averages over the authors' 100-instance set. Shown in report
# footnotes for context only; nothing here is computed or compared locally.
REFERENCE_AVERAGES = {
    "nima": {"neural_style": 5.13, "dps": 5.23, "wct2": 5.35, "strotss": 4.88, "deepobjstyle": 5.49},
    "pieapp": {"neural_style": 4.26, "dps": 3.92, "wct2": 3.22, "strotss": 4.21, "deepobjstyle": 2.83},
}


class CorpusError(ValueError):
    """The corpus directory does not follow ``<id>/{content,style,output}.png``."""


def luminance(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img @ np.array([0.299, 0.587, 0.114])


def structure_score(output, content) -> float:
    """Mean SSIM over luminance with 11x11 Gaussian windows (sigma 1.5)."""
    out = check_image(output, dtype=np.float64, name="output")
    ref = check_image(content, dtype=np.float64, name="content")
    if out.shape != ref.shape:
        raise ShapeMismatch(f"output {out.shape} vs content {ref.shape}")
    return float(structural_similarity(
        luminance(out), luminance(ref), data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    ))


def style_gram_distance(output, style, taps: Sequence[str] = STYLE_LAYERS, extractor=None, **extractor_kw) -> float:
    """Sum over taps of the squared difference of per-pixel-mean grams, over ``N_l**2``.

    Grams are divided by the number of feature columns so images of
    different sizes compare directly.
    """
    if extractor is None:
        extractor = get_extractor(**extractor_kw)
    out = torch.from_numpy(check_image(output, name="output")).to(extractor.dtype)
    sty = torch.from_numpy(check_image(style, name="style")).to(extractor.dtype)
    with torch.no_grad():
        fo = extract(out, taps, extractor)
        fs = extract(sty, taps, extractor)
        total = 0.0
        for layer in taps:
            F_O = fo[layer].reshape(fo[layer].shape[0], -1)
            F_S = fs[layer].reshape(fs[layer].shape[0], -1)
            # gram_distance halves; the metric uses 1/N^2 without the half
            total += 2.0 * float(gram_distance(masked_gram(F_O, None, "area"), masked_gram(F_S, None, "area"),
                                               F_O.shape[0]))
    return total


# -- external scorers --------------------------------------------------------

@dataclass(frozen=True)
class ScorerSpec:
    name: str
    command: tuple
    needs_reference: bool = False

    @property
    def provenance(self) -> str:
        return f"plugin:{self.name}"


def load_registry(path=None) -> dict:
    """Scorer registry from ``path`` or the file named by ``OBJSTYLE_SCORERS``."""
    path = path or os.environ.get(SCORERS_ENV)
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning("cannot read scorer registry %s: %s", path, exc)
        return {}
    reg = {}
    for name, entry in raw.items():
        cmd = entry.get("command")
        if isinstance(cmd, str):
            cmd = [cmd]
        if not cmd:
            continue
        reg[name] = ScorerSpec(name, tuple(cmd), bool(entry.get("needs_reference", False)))
    return reg


def _as_path(image, tmp: Path, stem: str) -> str:
    if isinstance(image, (str, os.PathLike)):
        return str(image)
    p = tmp / f"{stem}.png"
    image_io.save_image(check_image(image, name=stem), p)
    return str(p)


def external_score(output, reference=None, scorer: str = "nima", registry: Mapping | None = None,
                   timeout: float = 600.0) -> tuple[float, str]:
    """Run a scorer plugin and return ``(score, provenance)``.

    Raises ``ScorerUnavailable`` if the plugin is not registered, its
    executable is missing, it needs a reference that was not given, or it
    does not answer with a finite ``score``.
    """
    registry = load_registry() if registry is None else registry
    spec = registry.get(scorer)
    if spec is None:
        raise ScorerUnavailable(f"no scorer plugin named {scorer!r} is registered")
    if not isinstance(spec, ScorerSpec):
        spec = ScorerSpec(scorer, tuple(spec["command"]), bool(spec.get("needs_reference", False)))
    if shutil.which(spec.command[0]) is None and not Path(spec.command[0]).is_file():
        raise ScorerUnavailable(f"scorer {scorer!r}: executable {spec.command[0]!r} not found")
    if spec.needs_reference and reference is None:
        raise ScorerUnavailable(f"scorer {scorer!r} needs a reference image")

    with tempfile.TemporaryDirectory() as tmp:
        payload = {"image": _as_path(output, Path(tmp), "image")}
        if spec.needs_reference:
            payload["reference"] = _as_path(reference, Path(tmp), "reference")
        try:
            proc = subprocess.run(list(spec.command), input=json.dumps(payload), capture_output=True,
                                  text=True, timeout=timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ScorerUnavailable(f"scorer {scorer!r} failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise ScorerUnavailable(f"scorer {scorer!r} exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    try:
        score = float(json.loads(proc.stdout)["score"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ScorerUnavailable(f"scorer {scorer!r} returned malformed output: {proc.stdout[:200]!r}") from exc
    if not math.isfinite(score):
        raise ScorerUnavailable(f"scorer {scorer!r} returned a non-finite score")
    return score, spec.provenance


# -- corpus and report -------------------------------------------------------

def scan_corpus(corpus) -> list[Path]:
    corpus = Path(corpus)
    if not corpus.is_dir():
        raise CorpusError(f"corpus {corpus} is not a directory")
    entries = sorted(p for p in corpus.iterdir() if p.is_dir())
    if not entries:
        raise CorpusError(f"corpus {corpus} has no instance directories")
    for d in entries:
        missing = [f for f in CORPUS_FILES if not (d / f).is_file()]
        if missing:
            raise CorpusError(f"instance {d.name} is missing {', '.join(missing)}")
    return entries


def _final_losses(instance_dir: Path) -> Optional[dict]:
    hist = instance_dir / "history.jsonl"
    if not hist.is_file():
        return None
    last = None
    with open(hist) as fh:
        for line in fh:
            if line.strip():
                last = json.loads(line)
    if last is None:
        return None
    return {k: v for k, v in last.items() if k not in ("iteration", "elapsed_ms")}


def evaluate_instance(instance_dir, scorers: Sequence[str] = (), registry: Mapping | None = None,
                      taps: Sequence[str] = STYLE_LAYERS, vgg_weights=None, max_side: int = 512) -> dict:
    d = Path(instance_dir)
    content = image_io.load_image(d / "content.png", max_side)
    style = image_io.load_image(d / "style.png", max_side)
    output = image_io.load_image(d / "output.png", max_side)
    extractor = get_extractor(vgg_weights)
    row = {
        "id": d.name,
        "structure_score": structure_score(output, content),
        "style_gram_distance": style_gram_distance(output, style, taps, extractor),
        "final_losses": _final_losses(d),
        "external": {},
        "votes": None,
    }
    registry = load_registry() if registry is None else registry
    for name in scorers:
        try:
            score, _ = external_score(d / "output.png", d / "content.png", name, registry)
        except ScorerUnavailable as exc:
            logger.warning("%s: %s", d.name, exc)
            score = None
        row["external"][name] = score
    return row


def _evaluate_star(args):
    return evaluate_instance(*args)


def evaluate_corpus(corpus, scorers: Sequence[str] = (), registry: Mapping | None = None,
                    taps: Sequence[str] = STYLE_LAYERS, vgg_weights=None, jobs: int = 1) -> list[dict]:
    """Rows for every instance in ``corpus``, in sorted id order."""
    entries = scan_corpus(corpus)
    registry = load_registry() if registry is None else registry
    args = [(d, tuple(scorers), registry, tuple(taps), vgg_weights) for d in entries]
    if jobs > 1 and len(entries) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_star, args))
    return [evaluate_instance(*a) for a in args]


def _metric_columns(rows) -> dict:
    cols = {"structure_score": [r["structure_score"] for r in rows],
            "style_gram_distance": [r["style_gram_distance"] for r in rows]}
    names = []
    for r in rows:
        for k in r.get("external", {}):
            if k not in names:
                names.append(k)
    for k in names:
        cols[f"external.{k}"] = [r.get("external", {}).get(k) for r in rows]
    return cols


def aggregate(rows: Sequence[dict]) -> dict:
    """Mean and median per metric over non-null cells, with counts."""
    out = {}
    for name, values in _metric_columns(rows).items():
        present = [float(v) for v in values if v is not None]
        out[name] = {
            "mean": statistics.fmean(present) if present else None,
            "median": statistics.median(present) if present else None,
            "count": len(present),
            "null": len(values) - len(present),
        }
    return out


def emit_report(rows: Sequence[dict], out_path, scorer_provenance: Mapping | None = None,
                plots: bool = True) -> list[Path]:
    """Write ``report.json`` plus one bar plot per metric next to it."""
    rows = list(rows)
    if not rows:
        raise ValueError("emit_report needs at least one row")
    out_path = Path(out_path)
    report = {
        "rows": rows,
        "aggregate": aggregate(rows),
        "scorers": dict(scorer_provenance or {}),
        "footnotes": {
            "reference_averages": REFERENCE_AVERAGES,
            "note": "reference_averages are published figures on a different corpus, shown for context; "
                    "they are not computed or compared here",
            "votes": "reserved for manually entered preference votes",
        },
    }
    written = []
    try:
        out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        from .exceptions import WriteFailure
        raise WriteFailure(f"cannot write {out_path}: {exc}") from exc
    written.append(out_path)
    if plots:
        written += _plot_metrics(rows, out_path)
    return written


def _plot_metrics(rows, out_path: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    ids = [r["id"] for r in rows]
    for name, values in _metric_columns(rows).items():
        vals = [np.nan if v is None else float(v) for v in values]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(ids) + 2), 3.0), dpi=100)
        ax.bar(range(len(ids)), vals, color="#4C72B0")
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=8)
        ax.set_title(name)
        fig.tight_layout()
        p = out_path.with_name(f"{out_path.stem}_{name.replace('.', '_')}.png")
        fig.savefig(p, format="png", metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths
