"""Command-line interface for the export adapter.

Subcommands:

* ``demo``     — train a toy model on synthetic blobs, save its checkpoint,
                 and export a complete interchange bundle.
* ``export``   — export a bundle from an existing checkpoint (regenerating
                 the synthetic dataset from a seed).
* ``forward``  — forward engine-generated perturbed images and write a
                 manifest augmented with the perturbed artifact blocks.

Exit codes: 0 success, 1 adapter error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from .export import AdapterConfig, export_bundle, forward_on_perturbed
from .interchange import AdapterError
from .models import (
    MODEL_KINDS,
    build_model,
    load_checkpoint,
    make_blob_dataset,
    save_checkpoint,
    train_model,
)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)


def _add_io_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--saliency", default="upsample")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoscope-adapter",
        description="export torch part-prototype models as interchange bundles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="train a toy model and export a bundle")
    p.add_argument("--kind", choices=MODEL_KINDS, default="explicit-class-specific")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--steps", type=int, default=200)
    _add_data_args(p)
    _add_io_args(p)

    p = sub.add_parser("export", help="export a bundle from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="bundle output directory")
    _add_data_args(p)
    _add_io_args(p)

    p = sub.add_parser("forward", help="forward perturbed images into a new manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="bundle manifest written by export")
    p.add_argument("--perturbations", required=True, help="perturbations.json from the engine")
    p.add_argument("--out-manifest", default=None)
    _add_io_args(p)

    return parser


def _config_for(model, args) -> AdapterConfig:
    return AdapterConfig(
        kind=model.kind,
        saliency_method=args.saliency,
        batch_size=args.batch_size,
        device=args.device,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "demo":
            data = make_blob_dataset(args.classes, args.per_class, seed=args.seed)
            model = build_model(args.kind, args.classes, seed=args.seed)
            accuracy = train_model(
                model, data.torch_images, data.labels, steps=args.steps, seed=args.seed
            )
            manifest = export_bundle(model, data, _config_for(model, args), args.out)
            save_checkpoint(model, manifest.parent / "model.ckpt")
            print(f"trained {args.kind} to accuracy {accuracy:.3f}")
            print(f"bundle manifest: {manifest}")
        elif args.command == "export":
            model = load_checkpoint(args.checkpoint)
            data = make_blob_dataset(args.classes, args.per_class, seed=args.seed)
            manifest = export_bundle(model, data, _config_for(model, args), args.out)
            print(f"bundle manifest: {manifest}")
        elif args.command == "forward":
            model = load_checkpoint(args.checkpoint)
            out = forward_on_perturbed(
                model,
                args.manifest,
                args.perturbations,
                _config_for(model, args),
                out_manifest=args.out_manifest,
            )
            print(f"perturbed manifest: {out}")
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
