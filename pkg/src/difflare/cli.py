"""Command-line entry point: one subcommand per pipeline stage plus infer/eval.

Exit codes: 0 success, 2 config/usage error, 3 dependency or integrity error,
4 training/sampling divergence, 5 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .errors import EXIT_CODES, ConfigError, DifflareError, DimensionError, ParameterError

log = logging.getLogger("difflare")

STAGE_COMMANDS = ("synth", "train-vq", "train-diffusion", "train-sgim", "train-affm")


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    if isinstance(exc, (ParameterError, DimensionError)):
        return 2
    if isinstance(exc, OSError):
        return 5
    return 1


def _parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML config file")
    shared.add_argument("--seed", type=int, help="global seed")
    shared.add_argument("--out", help="run directory (default: $DIFFLARE_HOME or ./difflare_runs)")
    shared.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override, repeatable")
    shared.add_argument("--ci", action="store_true", help="start from the small CI profile instead of the defaults")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="difflare", description="Staged toy lens-flare removal pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[shared], help=f"run the {name} stage")
    sub.add_parser("all", parents=[shared], help="run every training stage in order")

    inf = sub.add_parser("infer", parents=[shared], help="restore one PNG")
    inf.add_argument("input", help="flare-corrupted PNG")
    inf.add_argument("output", help="where to write the restored PNG")
    inf.add_argument("--guidance-scale", type=float, help="classifier-free guidance scale s")
    inf.add_argument("--prompt-token", type=int, help="condition token (omit for NULL)")
    inf.add_argument("--no-affm", action="store_true", help="decode the restored latent without fusion")
    inf.add_argument("--dump-mask", metavar="PNG", help="also write the luminance mask")

    ev = sub.add_parser("eval", parents=[shared], help="score variants on the test split")
    ev.add_argument("--variants", nargs="+", help="subset of: input no-affm unguided-affm full")
    ev.add_argument("--n-images", type=int)
    ev.add_argument("--guidance-scale", type=float)
    ev.add_argument("--prompt-token", type=int)
    return p


def _config(args):
    cfg = config_mod.load(args.config) if args.config else (config_mod.ci_profile() if args.ci else config_mod.RunConfig())
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    for flag, key in (("guidance_scale", "infer.guidance_scale"), ("prompt_token", "infer.prompt_token"), ("n_images", "eval.n_images")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "variants", None):
        overrides.append(f"eval.variants={json.dumps(args.variants)}")
    return config_mod.resolve(cfg, overrides)


def _run(args) -> int:
    from . import pipeline

    cfg = _config(args)
    root = cfg.output_dir()
    if args.command in STAGE_COMMANDS:
        entry = pipeline.run_stage(args.command, cfg, root)
        print(json.dumps(entry, indent=1, sort_keys=True))
    elif args.command == "all":
        pipeline.run_all(cfg, root)
        print(f"pipeline complete in {root}")
    elif args.command == "infer":
        from .imaging import read_png, write_png
        from .lgp import luminance_mask

        x_in = read_png(args.input)
        models = pipeline.load_models(cfg, root, need=("vq", "diffusion", "sgim") + (() if args.no_affm else ("affm",)))
        out = pipeline.infer(x_in, models, cfg, seed=cfg.seed, affm=not args.no_affm)
        write_png(args.output, out)
        if args.dump_mask:
            write_png(args.dump_mask, luminance_mask(x_in, cfg.infer.lgp_threshold, cfg.infer.gradient_dilation).mask.astype(float))
        print(args.output)
    elif args.command == "eval":
        report = pipeline.evaluate(cfg, root)
        print(pipeline.report_table(report))
        print(f"report: {Path(root) / 'eval' / 'report.json'}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except DifflareError as exc:
        print(f"difflare: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"difflare: I/O error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
