"""Procedural smoke scenes with known segmentations.

Three bundled instances cover each problem kind:

``stp_e``
    content {sky, building}, style {sky, building}
``stp_c``
    content {sky, building, lake}, style {sky, building}
``stp_s``
    content {sky, grass}, style {sky, grass, tree}, with sky and grass
    deliberately cross-mapped

Run ``python -m objstyle.datasets OUT_DIR`` to regenerate the PNG files
shipped under ``objstyle/data/smoke``; ``--corpus DIR`` also writes a small
evaluation corpus in the ``<id>/{content,style,output}.png`` layout.
"""

from __future__ import annotations

import argparse
import json
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import image_io
from .image_io import SegmentationMask
from .objectmap import build_map, load_object_map

PALETTE = {
    "#87CEEB": "sky",
    "#808080": "building",
    "#1E90FF": "lake",
    "#00C800": "grass",
    "#006400": "tree",
}

THEMES = {
    "day": {
        "sky": ((0.35, 0.6, 0.95), (0.75, 0.88, 1.0)),
        "building": ((0.55, 0.55, 0.58), (0.25, 0.25, 0.3)),
        "lake": ((0.1, 0.35, 0.55), (0.3, 0.55, 0.7)),
        "grass": ((0.2, 0.55, 0.15), (0.45, 0.7, 0.25)),
        "tree": ((0.05, 0.3, 0.08), (0.15, 0.45, 0.1)),
    },
    "dusk": {
        "sky": ((0.95, 0.45, 0.2), (0.45, 0.15, 0.4)),
        "building": ((0.3, 0.18, 0.12), (0.95, 0.8, 0.35)),
        "lake": ((0.2, 0.1, 0.3), (0.8, 0.4, 0.2)),
        "grass": ((0.55, 0.45, 0.1), (0.8, 0.65, 0.2)),
        "tree": ((0.35, 0.1, 0.05), (0.6, 0.25, 0.05)),
    },
}

INSTANCES = {
    "stp_e": {"content": ("sky_building", "day"), "style": ("sky_building", "dusk"), "pairs": None},
    "stp_c": {"content": ("sky_building_lake", "day"), "style": ("sky_building", "dusk"), "pairs": None},
    "stp_s": {"content": ("sky_grass", "day"), "style": ("sky_grass_tree", "dusk"),
              "pairs": [["sky", "grass"], ["grass", "sky"]]},
}


def _layout(name: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, list]:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    index = np.zeros((h, w), dtype=np.int64)
    if name.startswith("sky_building"):
        labels = ["sky", "building"]
        skyline = 0.45 + 0.1 * rng.random()
        n_blocks = rng.integers(3, 6)
        edges = np.sort(rng.random(n_blocks - 1))
        heights = skyline - 0.2 * rng.random(n_blocks)
        block = np.searchsorted(edges, xx)
        index[yy > heights[block]] = 1
        if name.endswith("lake"):
            labels.append("lake")
            index[yy > 0.72 + 0.05 * np.sin(6 * xx)] = 2
    elif name.startswith("sky_grass"):
        labels = ["sky", "grass"]
        index[yy > 0.5 + 0.06 * np.sin(5 * xx + rng.random())] = 1
        if name.endswith("tree"):
            labels.append("tree")
            cx, cy = 0.3 + 0.4 * rng.random(), 0.45
            index[((xx - cx) / 0.16) ** 2 + ((yy - cy) / 0.22) ** 2 < 1] = 2
    else:
        raise ValueError(f"unknown layout {name!r}")
    return index, labels


def _texture(label: str, theme: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    top, bottom = (np.asarray(c) for c in theme[label])
    ramp = np.linspace(0, 1, size)[:, None, None]
    base = top * (1 - ramp) + bottom * ramp
    base = np.broadcast_to(base, (size, size, 3)).copy()
    if label == "building":
        yy, xx = np.mgrid[0:size, 0:size]
        windows = ((yy % 8) < 4) & ((xx % 8) < 4)
        base[windows] = 0.6 * base[windows] + 0.4 * np.asarray(theme[label][1])
    sigma = {"sky": 6.0, "building": 1.0, "lake": 2.0, "grass": 0.8, "tree": 1.5}[label]
    amp = {"sky": 0.25, "building": 0.08, "lake": 0.3, "grass": 0.6, "tree": 0.5}[label]
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma)
    noise /= noise.std() + 1e-12
    return base + amp * 0.1 * noise[:, :, None]


def make_image(layout: str, theme: str, size: int = 128, seed: int = 0) -> tuple[np.ndarray, SegmentationMask]:
    """Render one scene and its segmentation."""
    rng = np.random.default_rng(seed)
    index, labels = _layout(layout, size, rng)
    img = np.zeros((size, size, 3))
    for k, lab in enumerate(labels):
        tex = _texture(lab, THEMES[theme], size, rng)
        img[index == k] = tex[index == k]
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, SegmentationMask.from_index(index, labels)


def make_instance(name: str, size: int = 128, seed: int = 0) -> dict:
    """Content/style images, masks and object map for one smoke instance."""
    spec = INSTANCES[name]
    content, cmask = make_image(*spec["content"], size=size, seed=seed)
    style, smask = make_image(*spec["style"], size=size, seed=seed + 1)
    return {
        "content": content, "style": style, "content_mask": cmask, "style_mask": smask,
        "object_map": build_map(cmask, smask, spec["pairs"]), "palette": dict(PALETTE),
    }


def write_instance(name: str, out_dir, size: int = 128, seed: int = 0) -> Path:
    inst = make_instance(name, size, seed)
    out = Path(out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    image_io.save_image(inst["content"], out / "content.png")
    image_io.save_image(inst["style"], out / "style.png")
    image_io.save_mask(inst["content_mask"], out / "content_mask.png", PALETTE)
    image_io.save_mask(inst["style_mask"], out / "style_mask.png", PALETTE)
    (out / "palette.json").write_text(json.dumps(PALETTE, indent=2) + "\n")
    if INSTANCES[name]["pairs"] is not None:
        (out / "object_map.json").write_text(json.dumps({"pairs": INSTANCES[name]["pairs"]}) + "\n")
    return out


def smoke_dir(name: str) -> Path:
    return Path(str(resources.files("objstyle") / "data" / "smoke" / name))


def load_smoke(name: str) -> dict:
    """Load a bundled smoke instance from its PNG files."""
    d = smoke_dir(name)
    palette = image_io.load_palette(d / "palette.json")
    content = image_io.load_image(d / "content.png")
    style = image_io.load_image(d / "style.png")
    cmask = image_io.load_mask(d / "content_mask.png", content, palette)
    smask = image_io.load_mask(d / "style_mask.png", style, palette)
    if (d / "object_map.json").is_file():
        omap = load_object_map(d / "object_map.json", cmask, smask)
    else:
        omap = build_map(cmask, smask)
    return {"content": content, "style": style, "content_mask": cmask, "style_mask": smask,
            "object_map": omap, "palette": palette, "path": d}


CORPUS_SCENES = (
    ("sky_building", "sky_building"),
    ("sky_building_lake", "sky_building"),
    ("sky_grass", "sky_grass_tree"),
    ("sky_grass_tree", "sky_grass"),
    ("sky_building_lake", "sky_grass"),
)


def write_corpus(out_dir, n: int = 5, size: int = 64, seed: int = 0, blend: float = 0.5) -> list[Path]:
    """Write ``n`` (content, style, output) triples for the evaluation harness.

    The outputs are a fixed pixel blend of content and style, a stand-in
    for real stylizations that keeps the metrics away from their extremes.
    """
    out = Path(out_dir)
    written = []
    for k in range(n):
        c_layout, s_layout = CORPUS_SCENES[k % len(CORPUS_SCENES)]
        content, _ = make_image(c_layout, "day", size=size, seed=seed + 2 * k)
        style, _ = make_image(s_layout, "dusk", size=size, seed=seed + 2 * k + 1)
        d = out / f"scene_{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        image_io.save_image(content, d / "content.png")
        image_io.save_image(style, d / "style.png")
        image_io.save_image((1.0 - blend) * content + blend * style, d / "output.png")
        written.append(d)
    return written


def corpus_dir() -> Path:
    return Path(str(resources.files("objstyle") / "data" / "corpus"))


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write the procedural smoke instances as PNG files.")
    parser.add_argument("out_dir")
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--corpus", help="also write the evaluation corpus here")
    args = parser.parse_args(argv)
    for name in INSTANCES:
        print(write_instance(name, args.out_dir, args.size, args.seed))
    if args.corpus:
        for d in write_corpus(args.corpus, seed=args.seed):
            print(d)


if __name__ == "__main__":
    main()
