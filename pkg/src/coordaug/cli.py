"""Command line entry point: ``augment``, ``plan``, ``report`` and ``validate``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 config schema
violation, 4 dataset invalid, 5 backend failure, 6 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .dataset_io import load_dataset
from .errors import (
    BackendError,
    ConfigError,
    ConsistencyError,
    DatasetParseError,
    NumericError,
    ValidationError,
)
from .pipeline import Backends, PipelineConfig, plan_dataset, recompute_diversity, run_pipeline

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_DATASET, EXIT_BACKEND, EXIT_IO = range(7)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(args) -> PipelineConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
            data = (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
        except (OSError, ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        data["workers"] = args.workers
    return PipelineConfig.from_dict(data)


def _common(p: argparse.ArgumentParser, dataset_required=True):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--dataset", required=dataset_required, help="COCO annotation JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coordaug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("augment", help="run the full augmentation pipeline")
    _common(p)
    p.add_argument("--images", required=True, help="image root directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("plan", help="dry run: emit augmentation plans only")
    _common(p)
    p.add_argument("--out", help="write plans JSON here instead of stdout")

    p = sub.add_parser("report", help="recompute diversity metrics of a finished run")
    _common(p)
    p.add_argument("--images", required=True, help="original image root")
    p.add_argument("--out", required=True, help="output directory of the run")

    p = sub.add_parser("validate", help="lint a COCO dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--images", help="also check image files under this root")
    return parser


def _cmd_augment(args) -> int:
    config = load_config(args)
    _, report = run_pipeline(config, args.dataset, args.images, args.out)
    print(report.summary())
    return EXIT_OK


def _cmd_plan(args) -> int:
    config = load_config(args)
    text = json.dumps(plan_dataset(config, args.dataset), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_report(args) -> int:
    config = load_config(args)
    backends = Backends.from_config(config, ())
    result = recompute_diversity(args.dataset, args.images, args.out, backends.image_embedder)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_validate(args) -> int:
    categories, stream = load_dataset(args.dataset, args.images, load_images=args.images is not None)
    n_images = n_objects = 0
    for s in stream:
        n_images += 1
        n_objects += len(s.objects)
    print(f"ok: {n_images} images, {n_objects} annotations, {len(categories)} categories")
    return EXIT_OK


COMMANDS = {
    "augment": _cmd_augment,
    "plan": _cmd_plan,
    "report": _cmd_report,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, DatasetParseError, ConsistencyError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
