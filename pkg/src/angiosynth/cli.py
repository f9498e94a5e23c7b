"""Command-line entry point: ``angiosynth <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Errors are printed as a
single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import write_kv
from .errors import ConfigError

RUN_FORMAT = 1
ENV_RUN_DIR = "UWAT_RUN_DIR"

log = logging.getLogger("angiosynth")


class UsageError(Exception):
    pass


class _Formatter(argparse.HelpFormatter):
    # Fixed width so the generated reference does not depend on the terminal.
    def __init__(self, prog):
        super().__init__(prog, width=88)


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", _Formatter)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="angiosynth", description="Synthesize angiograms from reflectance fundus images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--run-dir", help=f"run directory (default: ${ENV_RUN_DIR} or ./runs/<command>)")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-synthetic", help="write a procedural paired dataset")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--count", type=int, required=True, help="number of pairs")
    g.add_argument("--height", type=int, default=256, help="image height, multiple of 16")
    g.add_argument("--width", type=int, default=320, help="image width, multiple of 16")
    g.add_argument("--vessel-branches", type=int, default=6, help="root vessel trees per image")
    g.add_argument("--lesion-count", type=int, default=4, help="bright lesions per image")
    g.add_argument("--noise-std", type=float, default=0.01, help="additive Gaussian noise, [0, 0.2]")
    g.add_argument("--out", required=True, help="output directory")

    pp = sub.add_parser("preprocess", help="sharpen, resize and cut augmented patches")
    pp.add_argument("--manifest", required=True, help="pair manifest (source<TAB>target)")
    pp.add_argument("--out", required=True, help="output directory")
    pp.add_argument("--height", type=int, default=2432, help="resize height")
    pp.add_argument("--width", type=int, default=3072, help="resize width")
    pp.add_argument("--clahe-clip", type=float, default=2.0, help="CLAHE clip limit")
    pp.add_argument("--clahe-tile", type=int, default=64, help="CLAHE tile size in pixels")
    pp.add_argument("--no-sharpen", action="store_true", help="skip CLAHE sharpening")
    pp.add_argument("--patch-h", type=int, default=608, help="patch height")
    pp.add_argument("--patch-w", type=int, default=768, help="patch width")
    pp.add_argument("--patches-per-image", type=int, default=50, help="patches sampled per pair")
    pp.add_argument("--coarse-factor", type=int, default=4, help="patch origin alignment")
    pp.add_argument("--no-augment", action="store_true", help="disable flips and rotations")
    pp.add_argument("--seed", type=int, default=0, help="sampling seed")

    t = sub.add_parser("train", help="train both generators and the discriminators")
    t.add_argument("--config", required=True, help="key=value training config file")
    t.add_argument("--manifest", required=True, help="pair manifest")
    t.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--no-attention", action="store_true",
                   help="ablation: disable the attention transmit module (M_NA)")

    s = sub.add_parser("synthesize", help="predict an angiogram for one image")
    s.add_argument("--weights", required=True, help="checkpoint file")
    s.add_argument("--input", required=True, help="3-channel source image")
    s.add_argument("--output", required=True, help="output PNG")
    s.add_argument("--tile", action="store_true", help="blend overlapping fine-generator tiles")
    s.add_argument("--tile-h", type=int, default=608, help="tile height")
    s.add_argument("--tile-w", type=int, default=768, help="tile width")

    e = sub.add_parser("evaluate", help="FID, KID, IS and LPIPS for two image directories")
    e.add_argument("--real", required=True, help="directory of real angiograms")
    e.add_argument("--fake", required=True, help="directory of generated angiograms")
    e.add_argument("--extractor", default="random:0", help="random[:seed] or vgg19:<weights>")
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--seed", type=int, default=0, help="KID subset seed")
    return p


def render_reference() -> str:
    """Markdown reference of every command and flag."""
    parser = build_parser()
    lines = ["# Command-line reference", "",
             "Generated by `python -m angiosynth.cli --reference`; do not edit by hand.", ""]

    def options(pr):
        for a in pr._actions:
            if isinstance(a, (argparse._HelpAction, argparse._SubParsersAction)):
                continue
            flags = ", ".join(f"`{o}`" for o in a.option_strings)
            extra = " (required)" if a.required else ""
            if a.default is not None and a.default is not False and a.default != argparse.SUPPRESS \
                    and not a.required:
                extra += f" (default: `{a.default}`)"
            lines.append(f"- {flags}: {a.help}{extra}")

    lines += ["## Global options", ""]
    options(parser)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    helps = {a.dest: a.help for a in sub._choices_actions}
    for name, sp in sub.choices.items():
        lines += ["", f"## `{name}`", "", f"{helps[name]}.", "", "```", sp.format_usage().strip(), "```", ""]
        options(sp)
    return "\n".join(lines) + "\n"


def resolve_run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    if os.environ.get(ENV_RUN_DIR):
        return Path(os.environ[ENV_RUN_DIR])
    if args.command == "train":
        return Path(args.out)
    return Path("runs") / args.command


def _snapshot(run_dir: Path, args, extra=None):
    values = {"command": args.command, "format_version": RUN_FORMAT, "version": __version__}
    values.update({k: v for k, v in vars(args).items() if k != "command" and v is not None})
    values.update(extra or {})
    write_kv(run_dir / f"{args.command}.run.txt", values, header="resolved run config")


def _cmd_gen_synthetic(args, run_dir):
    from .synthetic import SynthConfig, generate_dataset

    cfg = SynthConfig(seed=args.seed, height=args.height, width=args.width,
                      vessel_branches=args.vessel_branches, lesion_count=args.lesion_count,
                      noise_std=args.noise_std)
    cfg.validate()
    _snapshot(run_dir, args)
    manifest = generate_dataset(cfg, args.count, args.out)
    print(manifest)


def _cmd_preprocess(args, run_dir):
    from .data import PreprocessConfig, preprocess_dataset

    cfg = PreprocessConfig(target_height=args.height, target_width=args.width,
                           sharpen=not args.no_sharpen, clahe_clip=args.clahe_clip,
                           clahe_tile=args.clahe_tile, patch_height=args.patch_h,
                           patch_width=args.patch_w, patches_per_image=args.patches_per_image,
                           coarse_factor=args.coarse_factor, augment=not args.no_augment)
    cfg.validate()
    _snapshot(run_dir, args)
    print(preprocess_dataset(args.manifest, args.out, cfg, args.seed))


def _cmd_train(args, run_dir):
    from .trainer import load_train_config, train

    cfg = load_train_config(args.config)
    if args.no_attention:
        cfg = dataclasses.replace(
            cfg, generator_config=dataclasses.replace(cfg.generator_config, use_attention=False))
        cfg.validate()
    _snapshot(run_dir, args, {"seed": cfg.seed, "variant": cfg.generator_config.variant})
    print(train(cfg, args.manifest, args.out, resume=args.resume))


def _cmd_synthesize(args, run_dir):
    from .data import read_image, write_image
    from .trainer import load_checkpoint, synthesize

    state = load_checkpoint(args.weights)
    _snapshot(run_dir, args, {"variant": state.cfg.generator_config.variant})
    slo = read_image(args.input, 3)
    fa = synthesize(slo, state.model, tile=args.tile, tile_size=(args.tile_h, args.tile_w))
    write_image(args.output, fa)
    print(args.output)


def _cmd_evaluate(args, run_dir):
    from .metrics import evaluate

    _snapshot(run_dir, args)
    report = evaluate(args.real, args.fake, args.extractor, seed=args.seed)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.tsv_header())
    print(report.to_tsv())


COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "synthesize": _cmd_synthesize,
    "evaluate": _cmd_evaluate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv == ["--reference"]:
        sys.stdout.write(render_reference())
        return 0
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    try:
        run_dir = resolve_run_dir(args)
        run_dir.mkdir(parents=True, exist_ok=True)
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        try:
            COMMANDS[args.command](args, run_dir)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, MemoryError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
