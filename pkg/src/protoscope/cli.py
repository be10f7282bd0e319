"""Command line interface.

Exit codes
    0   success
    1   semantic failure (validation violations, degenerate inputs, suite errors)
    2   usage errors (bad arguments, unknown suite or format)
    3   I/O and container errors (unreadable files, bad manifests, bad tensors)
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from protoscope.errors import (
    FormatError,
    IoError,
    ManifestError,
    SuiteError,
    UsageError,
    ValidationError,
)
from protoscope.interchange import load_bundle
from protoscope.pipeline import SUITES, SuiteConfig, generate_perturbations, run_suite
from protoscope.radar import radar_normalize, render_radar_svg
from protoscope.report import load_report, report_to_json, write_csv, write_report
from protoscope.splits import hsv_context_split, stratified_splits


def _load_config(path: str | None, overrides: dict) -> SuiteConfig:
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"config {path} must hold a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return SuiteConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_validate(args) -> int:
    try:
        bundle = load_bundle(args.manifest)
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(
        f"OK: {bundle.dataset_name!r} ({bundle.model.kind}, "
        f"{len(bundle.samples)} samples, {bundle.class_count} classes)"
    )
    return 0


def _cmd_perturb(args) -> int:
    config = _load_config(args.config, {})
    if args.seed is not None:
        config = replace(
            config, seed=args.seed, perturbation=config.perturbation.with_seed(args.seed)
        )
    bundle = load_bundle(args.manifest)
    manifest = generate_perturbations(bundle, config, args.out)
    print(
        f"wrote {len(manifest['entries'])} perturbed images to {args.out} "
        f"({len(manifest['skipped'])} skipped)"
    )
    return 0


def _cmd_metrics(args) -> int:
    suites = tuple(SUITES) if args.suite == "all" else (args.suite,)
    if args.suite != "all" and args.suite not in SUITES:
        raise UsageError(f"unknown suite '{args.suite}'; choose one of {list(SUITES) + ['all']}")
    overrides = {
        "suites": list(suites),
        "parallelism": args.parallelism,
        "run_label": args.run_label or None,
        "seed": args.seed,
    }
    config = _load_config(args.config, overrides)
    bundle = load_bundle(args.manifest)
    report = run_suite(bundle, config)
    write_report(report, args.out)
    lines = sum(len(s.entities) for s in report.series.values())
    print(f"wrote {args.out}: {len(report.series)} metrics, {lines} entity values")
    return 0


def _cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        report = load_report(path)
        label = report.run.get("run_label") or Path(path).stem
        reports.append((label, report))
    if args.labels:
        if len(args.labels) != len(reports):
            raise UsageError(
                f"--labels needs one label per report ({len(reports)} reports, "
                f"{len(args.labels)} labels)"
            )
        reports = [(label, rep) for label, (_, rep) in zip(args.labels, reports)]
    out = Path(args.out)
    if args.format == "json":
        merged = {
            "schema": "protoscope-comparison/1",
            "models": {label: rep.to_dict()["metrics"] for label, rep in reports},
        }
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv":
        if len(reports) != 1:
            raise UsageError("csv output takes exactly one report")
        write_csv(reports[0][1], out)
    else:  # svg
        values: dict[str, dict[str, float]] = {}
        inversions: dict[str, bool] = {}
        for label, rep in reports:
            for metric, series in rep.series.items():
                if series.mean is None:
                    continue
                values.setdefault(metric, {})[label] = float(series.mean)
                if series.direction == "lower":
                    inversions[metric] = True
        shared = {m: v for m, v in values.items() if len(v) == len(reports)}
        specs = radar_normalize(shared, inversions=inversions)
        svg = render_radar_svg(specs, title=args.title)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(svg)
    print(f"wrote {out}")
    return 0


def _cmd_split(args) -> int:
    bundle = load_bundle(args.manifest)
    ids = [s.sample_id for s in bundle.samples]
    labels = [s.labels[0] for s in bundle.samples]
    out = Path(args.out)
    if args.mode == "stratified":
        result = stratified_splits(labels, seed=args.seed)
        doc = {
            "schema": "protoscope-splits/1",
            "mode": "stratified",
            "seed": args.seed,
            "test": [ids[i] for i in result.test],
            "folds": [
                {"train": [ids[i] for i in fold.train], "val": [ids[i] for i in fold.val]}
                for fold in result.folds
            ],
        }
    else:
        images = [s.image for s in bundle.samples]
        result = hsv_context_split(images, labels, seed=args.seed)
        doc = {
            "schema": "protoscope-splits/1",
            "mode": "hsv",
            "seed": args.seed,
            "trainval": [ids[i] for i in result.trainval],
            "test": [ids[i] for i in result.test],
            "fallback_classes": list(result.fallback_classes),
        }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoscope",
        description="Interpretability metric suites for part-prototype image classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a dataset manifest")
    p.add_argument("manifest")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("perturb", help="generate perturbed images for export")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_perturb)

    p = sub.add_parser("metrics", help="evaluate one suite (or 'all') over a manifest")
    p.add_argument("suite", help=f"one of {list(SUITES)} or 'all'")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--run-label", default="")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("report", help="convert or combine report files")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--format", required=True, choices=("json", "csv", "svg"))
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="*", default=None, help="model labels, one per report")
    p.add_argument("--title", default="")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("split", help="compute dataset splits from a manifest")
    p.add_argument("mode", choices=("stratified", "hsv"))
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_split)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SuiteError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IoError, ManifestError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
