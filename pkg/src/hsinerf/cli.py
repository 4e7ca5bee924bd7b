"""Command-line entry point: ``hsinerf simulate|train|render|detect|evaluate|ablate``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="seed applied to the scene, view sampler and init")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help="BLAS worker threads")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="hsinerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render the analytic scene into a dataset")
    _common(p)

    p = sub.add_parser("train", help="train a spectral field on a dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("render", help="render cubes from a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--poses", help="poses.json to render (default: the training dataset's)")
    p.add_argument("--orbit", help="comma-separated keyframe indices for an orbit path")
    p.add_argument("--frames", type=int, help="frames along the orbit")
    p.add_argument("--spectra", help="spectra.json whose channel count must match")
    p.add_argument("--no-falsecolor", action="store_true")

    p = sub.add_parser("detect", help="ACE detection on cubes")
    _common(p)
    p.add_argument("cubes", nargs="+", help=".hsic files")
    p.add_argument("--spectrum", required=True, help="spectra.json with gas_absorption")
    p.add_argument("--tau", type=float, help="ACE threshold (default 0.6)")
    p.add_argument("--masks", help="directory of reference mask PNGs")

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on its eval views")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", choices=("truth", "ace"))
    p.add_argument("--views", help="comma-separated eval view ids (default: checkpoint's)")

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--inline", action="store_true", help="run cells in this process")
    return parser


def _overrides(args):
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        for key in ("scene.seed", "views.seed", "train.seed"):
            over[key] = str(args.seed)
    return over


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def dispatch(args):
    from . import pipeline

    settings = pipeline.load_settings(args.config, _overrides(args))
    cmd = args.command
    if cmd == "simulate":
        frames = pipeline.cmd_simulate(settings, args.out)
        print(f"wrote {len(frames)} views to {args.out}")
    elif cmd == "train":
        state = pipeline.cmd_train(settings, args.data, args.out, resume=args.resume)
        print(f"trained to iteration {state.iteration}; checkpoint {args.out}/final.ckpt")
    elif cmd == "render":
        wl = None
        if args.spectra:
            from .formats import read_json
            wl = read_json(args.spectra)["wavelengths_um"]
        frames = args.frames if args.frames is not None else settings["render.frames"]
        written = pipeline.cmd_render(args.checkpoint, args.out, args.poses,
                                      _ints(args.orbit) if args.orbit else None, frames, wl,
                                      settings["render.falsecolor"] and not args.no_falsecolor)
        print(f"rendered {len(written)} cubes to {args.out}")
    elif cmd == "detect":
        tau = settings["detect.tau"] if args.tau is None else args.tau
        rows = pipeline.cmd_detect(args.cubes, args.spectrum, args.out, tau, args.masks)
        print(f"detected on {len(args.cubes)} cubes; {len(rows)} metric rows")
    elif cmd == "evaluate":
        labels = args.labels or settings["detect.labels"]
        ids = _ints(args.views) if args.views else None
        _, summary = pipeline.cmd_evaluate(args.checkpoint, args.data, args.out, labels,
                                           settings["detect.tau"], ids)
        print(pipeline.format_summary(summary), end="")
    elif cmd == "ablate":
        rows = pipeline.cmd_ablate(settings, args.data, args.out, isolate=not args.inline)
        print(f"{len(rows)} ablation rows in {args.out}/ablation.csv")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .autodiff import NumericError
    from .render import InvariantError

    try:
        return dispatch(args)
    except (NumericError, InvariantError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
