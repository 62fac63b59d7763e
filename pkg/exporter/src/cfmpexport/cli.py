"""Command-line entry: export one network's feature maps for an image set.

Results (the manifest path) go to stdout, progress to stderr.  Exit codes
match the consumer's convention: 0 success, 1 usage error, 2 missing or
undecodable input, 3 invalid parameter values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .catalog import MODEL_TAPS, WEIGHT_CHOICES, catalog
from .export import ExportSpec, export

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".ppm", ".bmp")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def find_images(directory: str | Path) -> tuple[Path, ...]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {root} does not exist")
    paths = sorted(
        p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise FileNotFoundError(
            f"no images under {root} (looked for {', '.join(IMAGE_SUFFIXES)})"
        )
    return tuple(paths)


def _parse_scales(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ValueError(f"bad scale list {text!r}, expected e.g. '1' or '1,2'")


def build_parser() -> _Parser:
    parser = _Parser(prog="cfmp-export", description=__doc__)
    parser.add_argument(
        "--model", required=True, choices=sorted(MODEL_TAPS), help="network to run"
    )
    parser.add_argument("--images", help="directory of source images")
    parser.add_argument("--out", help="output dataset directory")
    parser.add_argument(
        "--layers",
        default="",
        help="comma list of layer names; default exports the whole catalog",
    )
    parser.add_argument("--scales", default="1,2", help="e.g. '1' or '1,2' (default)")
    parser.add_argument(
        "--weights",
        choices=WEIGHT_CHOICES,
        default="pretrained",
        help="'none' = random init from --seed, for offline shape-level work",
    )
    parser.add_argument("--seed", type=int, default=0, help="init seed for --weights none")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--dataset-name", default="", help="default: output dir name")
    parser.add_argument("--list-layers", action="store_true", help="print the catalog and exit")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_layers:
        for tap in catalog(args.model):
            print(f"{tap.name}\t{tap.side}x{tap.side}x{tap.depth}")
        return 0
    if not args.images or not args.out:
        parser.error("the following arguments are required: --images, --out")
    try:
        spec = ExportSpec(
            model_name=args.model,
            image_paths=find_images(args.images),
            out_dir=Path(args.out),
            layer_names=tuple(args.layers.split(",")) if args.layers else (),
            scale_ids=_parse_scales(args.scales),
            weights=args.weights,
            seed=args.seed,
            batch_size=args.batch_size,
            device=args.device,
            dataset_name=args.dataset_name,
        )
        manifest_path = export(spec)
    except FileNotFoundError as exc:
        print(f"cfmp-export: missing input: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"cfmp-export: {exc}", file=sys.stderr)
        return 3
    print(str(manifest_path))
    return 0


if __name__ == "__main__":
    sys.exit(main())
