"""``objstyle`` command line: ``run``, ``losses`` and ``eval``.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine, evaluation, image_io
from .exceptions import ObjStyleError, TooSmall, UnreadableFile
from .image_io import SegmentationMask
from .objectmap import build_map, load_object_map

logger = logging.getLogger("objstyle")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flag dest -> RunConfig field; flags left unset fall through to file/defaults
_CONFIG_FLAGS = {
    "iterations": "iterations",
    "optimizer": "optimizer",
    "step_size": "step_size",
    "init": "init",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
    "log_every": "log_every",
    "max_side": "max_side",
    "vgg_weights": "vgg_weights",
}


class UsageError(Exception):
    pass


def _add_instance_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--content", required=True, help="content image (PNG/JPEG)")
    p.add_argument("--style", required=True, help="style image (PNG/JPEG)")
    p.add_argument("--content-mask", help="indexed-color content segmentation")
    p.add_argument("--style-mask", help="indexed-color style segmentation")
    p.add_argument("--palette", help='palette JSON {"#RRGGBB": "label"}; defaults to palette.json beside the masks')
    p.add_argument("--object-map", help='object map JSON {"pairs": [[content, style], ...]}; omitted = pair equal labels')
    p.add_argument("--config", help="run config JSON; flags override its values")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--optimizer", choices=("lbfgs", "adam"))
    p.add_argument("--step-size", type=float)
    p.add_argument("--init", choices=("content", "noise"))
    p.add_argument("--max-side", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--vgg-weights", help="VGG19 state dict path, or 'random' (also OBJSTYLE_VGG_WEIGHTS)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objstyle", description="Object-aware photo style transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize an output image")
    _add_instance_args(run)
    run.add_argument("--out-dir", required=True)

    losses = sub.add_parser("losses", help="print the loss breakdown of a candidate image")
    _add_instance_args(losses)
    losses.add_argument("--candidate", required=True)

    ev = sub.add_parser("eval", help="score a corpus of (content, style, output) triples")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True, help="report JSON path; plots are written beside it")
    ev.add_argument("--scorer", action="append", default=[], help="external scorer plugin id (repeatable)")
    ev.add_argument("--jobs", type=int, default=1)
    ev.add_argument("--vgg-weights")
    ev.add_argument("--no-plots", action="store_true")
    ev.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _require_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _config(args) -> engine.RunConfig:
    data = {}
    if args.config:
        cfg_path = _require_file(args.config, "--config")
        try:
            data = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON ({exc})") from exc
    for dest, key in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            data[key] = value
    try:
        return engine.RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from exc


def _load_image(path, flag: str, max_side: int):
    try:
        return image_io.load_image(_require_file(path, flag), max_side)
    except (UnreadableFile, TooSmall) as exc:
        raise UsageError(f"{flag}: {exc}") from exc


def _load_instance(args, cfg: engine.RunConfig):
    content = _load_image(args.content, "--content", cfg.max_side)
    style = _load_image(args.style, "--style", cfg.max_side)
    if bool(args.content_mask) != bool(args.style_mask):
        raise UsageError("--content-mask and --style-mask must be given together")
    if args.content_mask:
        cm_path = _require_file(args.content_mask, "--content-mask")
        sm_path = _require_file(args.style_mask, "--style-mask")
        if args.palette:
            palette = image_io.load_palette(_require_file(args.palette, "--palette"))
        elif (cm_path.parent / "palette.json").is_file():
            palette = image_io.load_palette(cm_path.parent / "palette.json")
        else:
            raise UsageError("--palette is required (no palette.json beside --content-mask)")
        cmask = image_io.load_mask(cm_path, content, palette)
        smask = image_io.load_mask(sm_path, style, palette)
    else:
        cmask = SegmentationMask.full(*content.shape[:2])
        smask = SegmentationMask.full(*style.shape[:2])
    if args.object_map:
        omap = load_object_map(_require_file(args.object_map, "--object-map"), cmask, smask)
    else:
        omap = build_map(cmask, smask)
    return content, style, cmask, smask, omap


def cmd_run(args) -> int:
    cfg = _config(args)
    content, style, cmask, smask, omap = _load_instance(args, cfg)
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"--out-dir: cannot create {out_dir}: {exc}") from exc
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    output, state = engine.run(content, style, cmask, smask, omap, cfg, out_dir=out_dir)
    image_io.save_image(output, out_dir / "output.png")
    last = state.history[-1]
    logger.info("finished %d iterations, total loss %.6g", state.iteration, last["total"])
    print(json.dumps({"output": str(out_dir / "output.png"), "iterations": state.iteration,
                      "total": last["total"]}))
    return EXIT_OK


def cmd_losses(args) -> int:
    cfg = _config(args)
    content, style, cmask, smask, omap = _load_instance(args, cfg)
    candidate = _load_image(args.candidate, "--candidate", cfg.max_side)
    ctx = engine.prepare(content, style, cmask, smask, omap, cfg)
    breakdown = engine.evaluate(ctx, candidate)
    print(json.dumps(breakdown, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        entries = evaluation.scan_corpus(args.corpus)
    except evaluation.CorpusError as exc:
        raise UsageError(f"--corpus: {exc}") from exc
    registry = evaluation.load_registry()
    rows = evaluation.evaluate_corpus(args.corpus, args.scorer, registry, vgg_weights=args.vgg_weights,
                                      jobs=args.jobs)
    provenance = {name: (registry[name].provenance if name in registry else None) for name in args.scorer}
    evaluation.emit_report(rows, args.out, provenance, plots=not args.no_plots)
    print(json.dumps({"report": str(args.out), "instances": len(entries)}))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "losses": cmd_losses, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"objstyle {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ObjStyleError, OSError, ValueError) as exc:
        print(f"objstyle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
