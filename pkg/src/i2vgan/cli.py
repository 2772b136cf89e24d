"""Command line: ``i2vgan {train,translate,evaluate,inspect}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from i2vgan import config as C
from i2vgan.data import DatasetError, load_manifest, preprocess, save_frame
from i2vgan.metrics import MetricError, evaluate, make_extractor
from i2vgan.networks import CheckpointError, load_bundle

log = logging.getLogger("i2vgan")


class CommandError(Exception):
    pass


def _train(args) -> int:
    from i2vgan.trainer import load_checkpoint, train

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.output is not None:
        overrides.append(f"output.dir={json.dumps(str(args.output))}")
    for flag in ("pcp", "exs", "ins", "recycle"):
        if getattr(args, f"no_{flag}"):
            overrides.append(f"ablation.no_{flag}=true")
    values = C.resolve(args.config, overrides)
    if not values["data.root"]:
        raise C.ConfigError("data.root", f"missing dataset root (set it or ${C.DATA_ROOT_ENV})")
    cfg = C.to_train_config(values)
    out = Path(values["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(C.dump(values))
    manifest = load_manifest(values["data.root"])
    state = load_checkpoint(args.resume) if args.resume else None
    state, history = train(manifest, cfg, out, state)
    if history:
        last = history[-1]
        print(f"finished at iteration {state.iteration}: total {last['total']:.4f} "
              f"cyc {last['cyc']:.4f}")
    return 0


def _translate(args) -> int:
    bundle = load_bundle(args.checkpoint)
    in_dir, out_dir = Path(args.input), Path(args.output)
    if not in_dir.is_dir():
        raise CommandError(f"input directory not found: {in_dir}")
    paths = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    if not paths:
        raise CommandError(f"no frames in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    G = bundle.generator(args.direction)
    import torch

    dtype = getattr(torch, bundle.config.dtype)
    with torch.no_grad():
        for p in paths:
            frame = preprocess(p, bundle.config.image_size).to(dtype)
            save_frame(G(frame)[0], out_dir / (p.stem + ".png"))
    print(f"wrote {len(paths)} frames to {out_dir}")
    return 0


def _evaluate(args) -> int:
    extractor = make_extractor(args.extractor)
    report_path = args.output or Path(args.translated) / "evaluation.json"
    report = evaluate(args.translated, args.reference, extractor, paired=not args.unpaired,
                      report_path=report_path)
    for name, s in report.subsets.items():
        psnr = "n/a" if s.psnr_mean is None else f"{s.psnr_mean:.4f}"
        ssim = "n/a" if s.ssim_mean is None else f"{s.ssim_mean:.4f}"
        print(f"{name}: FID {s.fid:.4f}  PSNR {psnr}  SSIM {ssim}  frames {s.frame_count}")
    print(f"report written to {report_path}")
    return 0


def format_inspect_table(manifest) -> str:
    rows = {}
    for s in manifest.subsets:
        row = rows.setdefault(s.name, {"train": (0, 0, 0), "test": (0, 0, 0)})
        row[s.split] = (len(s.domain_x_clips) + len(s.domain_y_clips),
                        s.frame_count("X"), s.frame_count("Y"))
    header = f"{'SUBSET':<24}{'TRAIN':>16}{'TEST':>16}{'TOTAL':>16}{'CLIPS':>8}"
    lines = [header, "-" * len(header)]

    def cell(x, y):
        return f"{x}" if x == y else f"{x}/{y}"

    for name, r in rows.items():
        (c1, x1, y1), (c2, x2, y2) = r["train"], r["test"]
        lines.append(f"{name:<24}{cell(x1, y1):>16}{cell(x2, y2):>16}"
                     f"{cell(x1 + x2, y1 + y2):>16}{c1 + c2:>8}")
    if manifest.excluded:
        lines.append(f"excluded (< 3 frames): {', '.join(manifest.excluded)}")
    return "\n".join(lines)


def _inspect(args) -> int:
    root = args.dataset_root or os.environ.get(C.DATA_ROOT_ENV)
    if not root:
        raise C.ConfigError("data.root", f"missing dataset root (argument or ${C.DATA_ROOT_ENV})")
    manifest = load_manifest(root)
    print("frames per domain (infrared/visible when they differ)")
    print(format_inspect_table(manifest))
    if args.export:
        manifest.export(args.export)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2vgan", description="Unpaired infrared-to-visible video translation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--output", help="output directory (output.dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")
    for flag in ("pcp", "exs", "ins", "recycle"):
        p.add_argument(f"--no-{flag}", action="store_true", help=f"ablate the {flag} term")
    p.set_defaults(func=_train)

    p = sub.add_parser("translate", help="translate a directory of frames")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--direction", choices=("x2y", "y2x"), default="x2y")
    p.set_defaults(func=_translate)

    p = sub.add_parser("evaluate", help="FID / PSNR / SSIM of translated frames")
    p.add_argument("--translated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--output", type=Path, help="report file (default <translated>/evaluation.json)")
    p.add_argument("--extractor", default="perceptual", choices=("perceptual", "pixel"))
    p.add_argument("--unpaired", action="store_true", help="FID only; allow unequal frame counts")
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("inspect", help="list subsets, clips and frame counts")
    p.add_argument("dataset_root", nargs="?")
    p.add_argument("--export", type=Path, help="write the manifest as JSON")
    p.set_defaults(func=_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, MetricError, CheckpointError, CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
