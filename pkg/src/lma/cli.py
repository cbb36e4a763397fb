"""Command-line entry point.

Every config field is exposed as a dotted flag (``--lma.alpha 0.3``,
``--train.epochs 5``); flags override ``--config FILE``.  Results go to
stdout as JSON.  Failures exit nonzero and print a JSON error record on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import types
import typing

from .experiment import (ARTIFACT_ENV, INFINITE, ConfigError, ExperimentConfig, RunArtifact, build_dataset,
                         config_fields, emit_plots, invariance_groups, parse_config, run_seeds, sweep_alpha,
                         sweep_k, sweep_views)

VERBS = ("pretrain", "probe", "invariance", "sweep-alpha", "sweep-views", "sweep-k", "plot")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(inner):
    def parse(text: str):
        return None if text.strip().lower() in ("none", "null") else inner(text)
    parse.__name__ = getattr(inner, "__name__", "value")
    return parse


def _range_item(text: str) -> tuple[str, list[float]]:
    name, sep, bounds = text.partition("=")
    try:
        values = [float(v) for v in bounds.split(",")]
    except ValueError:
        values = []
    if not sep or len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected FACTOR=LO,HI, got {text!r}")
    return name, values


def _add_field(parser: argparse.ArgumentParser, name: str, hint, default) -> None:
    kwargs = {"dest": name, "default": argparse.SUPPRESS, "help": f"(default: {default!r})"}
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    optional = False
    if origin in (typing.Union, types.UnionType):
        optional = type(None) in args
        hint = [a for a in args if a is not type(None)][0]
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is dict:
        kwargs["type"] = _range_item
        kwargs["nargs"] = "+"
    elif origin in (list, tuple):
        item = args[0] if args else str
        kwargs["type"] = {bool: _bool}.get(item, item)
        kwargs["nargs"] = len(args) if origin is tuple and args and args[-1] is not Ellipsis else "+"
    else:
        kwargs["type"] = {bool: _bool}.get(hint, hint)
    if optional:
        kwargs["type"] = _optional(kwargs["type"])
    parser.add_argument(f"--{name}", **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lma", description="Local manifold augmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        if verb == "plot":
            p.add_argument("runs", nargs="+", help="run directories")
            p.add_argument("--out", required=True, help="output directory for plots and tables")
            continue
        p.add_argument("--config", help="JSON config file")
        if verb in ("probe", "invariance"):
            p.add_argument("--encoder", required=True, help="encoder checkpoint to evaluate")
        if verb.startswith("sweep"):
            p.add_argument("--workers", type=int, default=1)
        if verb == "sweep-alpha":
            p.add_argument("--alphas", type=float, nargs="+", required=True)
            p.add_argument("--modes", nargs="+", default=["lma", "mix"])
        elif verb == "sweep-views":
            p.add_argument("--counts", nargs="+", required=True, help=f"view counts; {INFINITE!r} for the full prior")
        elif verb == "sweep-k":
            p.add_argument("--ks", type=int, nargs="+", required=True)
        for name, hint, default in config_fields():
            _add_field(p, name, hint, default)
    return parser


def config_from_args(ns: argparse.Namespace) -> ExperimentConfig:
    blob = ExperimentConfig().to_dict()
    if getattr(ns, "config", None):
        with open(ns.config) as fh:
            try:
                blob = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{ns.config}: not valid JSON: {exc}"]) from None
    overrides = {k: v for k, v in vars(ns).items() if "." in k or k in ("seeds", "output_dir")}
    for key, value in overrides.items():
        head, _, tail = key.partition(".")
        if tail:
            section = blob.setdefault(head, {})
            if not isinstance(section, dict):
                raise ConfigError([f"{head}: expected an object"])
            if isinstance(value, list) and value and isinstance(value[0], tuple):
                value = dict(value)
            section[tail] = list(value) if isinstance(value, tuple) else value
        else:
            blob[head] = value
    return parse_config(blob)


def _summary(a: RunArtifact) -> dict:
    return {"config_hash": a.config_hash, "path": str(a.path), "seed": a.seed, "top1": a.top1,
            "top5": a.probe["top5"], "orbit_cosine": a.orbit_cosine, "fid": a.fid["fid"] if a.fid else None}


def _jsonable(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return INFINITE
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def run(ns: argparse.Namespace) -> dict:
    from .embedding import load_encoder_checkpoint
    from .evaluation import invariance_report, train_linear_probe

    if ns.verb == "plot":
        arts = [RunArtifact.load(p) for p in ns.runs]
        return {"plots": [str(p) for p in emit_plots(arts, ns.out)]}
    cfg = config_from_args(ns)
    if ns.verb == "pretrain":
        return {"runs": [_summary(a) for a in run_seeds(cfg)]}
    if ns.verb == "probe":
        enc = load_encoder_checkpoint(ns.encoder)
        probe = train_linear_probe(enc, build_dataset(cfg.dataset), cfg.probe)
        return {"encoder_id": enc.encoder_id, **probe.report()}
    if ns.verb == "invariance":
        enc = load_encoder_checkpoint(ns.encoder)
        groups = invariance_groups(enc, build_dataset(cfg.dataset), cfg.evaluation.invariance_views)
        return invariance_report(groups, encoder_id=enc.encoder_id).to_dict()
    if ns.verb == "sweep-alpha":
        res = sweep_alpha(cfg, ns.alphas, ns.modes, workers=ns.workers)
    elif ns.verb == "sweep-views":
        res = sweep_views(cfg, ns.counts, workers=ns.workers)
    else:
        res = sweep_k(cfg, ns.ks, workers=ns.workers)
    return {"kind": res.kind, "rows": res.rows, "outputs": [str(p) for p in res.outputs]}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = run(ns)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc), "details": exc.errors}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "artifact_root_env": ARTIFACT_ENV}), file=sys.stderr)
        return 1
    print(json.dumps(_jsonable(result), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
