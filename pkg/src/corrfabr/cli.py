"""Command-line entry point: one subcommand per pipeline step.

    corrfabr <command> [--config FILE] [--seed N] [--workdir DIR] [--mode M]
                       [--key=value ...]

Overrides use dotted keys for nested sections (``--fusion.epochs=200``);
values are parsed as JSON when possible and as strings otherwise.  Exit
codes: 0 ok, 1 input error, 2 internal error.
"""

import argparse
import json
import logging
import os
import sys

from filelock import FileLock, Timeout

from . import pipeline
from .pipeline import InputError
from .tensor_io import TensorFormatError, image_to_tensor

COMMANDS = {
    "synth": pipeline.run_synth,
    "preprocess": pipeline.run_preprocess,
    "extract": pipeline.run_extract,
    "aggregate": pipeline.run_aggregate,
    "train-fusion": pipeline.run_train_fusion,
    "encode": pipeline.run_encode,
    "train-predict": pipeline.run_train_predict,
    "evaluate": pipeline.run_evaluate,
    "run": pipeline.run_all,
}

HELP = {
    "synth": "generate a synthetic cohort and its manifest under <workdir>/cohort",
    "preprocess": "crop, resize and normalize radiology; stain-normalize pathology",
    "extract": "feature maps and region vectors for both modalities",
    "aggregate": "fold assignment and paired feature sets per fold",
    "train-fusion": "train one CorrNet per fold",
    "encode": "CorrFeat vectors (and optional dense maps) from radiology only",
    "train-predict": "train one region classifier per fold",
    "evaluate": "held-out metrics per fold, written to reports/",
    "run": "every step from preprocess to evaluate",
}


def parse_overrides(extra):
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise InputError(f"unrecognized argument {item!r} (overrides look like --key=value)")
        key, raw = item[2:].split("=", 1)
        key = ".".join(part.replace("-", "_") for part in key.split("."))
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="corrfabr", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name],
                           epilog="any config key can be overridden with --key=value")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workdir")
        p.add_argument("--mode", choices=pipeline.MODES)
    conv = sub.add_parser("convert", help="convert a PNG/PPM image to a CFTN tensor")
    conv.add_argument("src")
    conv.add_argument("dst")
    conv.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    return ap


def _config(args, extra):
    overrides = parse_overrides(extra)
    for name in ("seed", "workdir", "mode"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    cfg = pipeline.load_config(args.config, overrides)
    if not cfg.manifest:
        default = os.path.join(cfg.workdir, "cohort", "manifest.json")
        if os.path.exists(default):
            cfg.manifest = default
    return cfg


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "convert":
            if extra:
                raise InputError(f"unrecognized arguments {extra}")
            image_to_tensor(args.src, args.dst, args.dtype)
            return 0
        cfg = _config(args, extra)
        os.makedirs(cfg.workdir, exist_ok=True)
        with FileLock(os.path.join(cfg.workdir, ".lock"), timeout=0):
            result = COMMANDS[args.command](cfg)
        if isinstance(result, pipeline.MetricsReport):
            print(result.table())
        elif args.command == "synth":
            print(result)
        return 0
    except Timeout:
        print("error: workdir is locked by another command", file=sys.stderr)
        return 1
    except (InputError, TensorFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("corrfabr").debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
