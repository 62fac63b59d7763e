"""Command-line driver for the retrieval pipeline.

Subcommands mirror the pipeline stages: ``synth`` makes a dataset,
``train-vocab`` fits a codebook, ``encode`` writes per-image descriptors,
``fit-pca``/``project`` handle compression, ``index`` consolidates
descriptors, ``query``/``evaluate``/``sweep`` run retrieval, and the two
``viz-*`` commands render qualitative checks.

Conventions shared by every subcommand:

* results go to stdout, diagnostics and progress to stderr;
* exit codes: 0 success, 1 usage error, 2 malformed input file,
  3 computation error (bad values, impossible configuration);
* heavy stages write a ``.meta.json`` sidecar recording all parameters
  (defaults materialized) plus input digests, and are skipped when their
  outputs already exist with a matching sidecar (``--force`` overrides).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codebook import load_codebook, save_codebook
from .dataset import load_manifest, synth_dataset
from .errors import FormatError
from .evaluation import (
    evaluate_index,
    load_holidays_ground_truth,
    load_oxford_ground_truth,
)
from .pipeline import (
    PipelineConfig,
    check_feature_files,
    encode_image,
    file_digest,
    meta_path,
    outputs_cached,
    stage_meta,
    sweep,
    train_codebook_stage,
    write_meta,
)
from .ppm import write_ppm
from .projection import (
    fit_pca_whiten,
    load_projection,
    project_many,
    save_projection,
)
from .retrieval import (
    build_index,
    index_from_vlads,
    load_descriptor_matrix,
    query_by_id,
    save_descriptor_matrix,
)
from .vlad import VladDescriptor, load_vlad, save_vlad
from .visualization import correspondence_mosaic, load_patch_sources, patch_clusters


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _parse_scales(text: str) -> tuple[int, ...]:
    try:
        scales = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ValueError(f"bad scale list {text!r}, expected e.g. '1' or '1,2'")
    if not scales or list(scales) != sorted(set(scales)):
        raise ValueError(f"scales must be ascending and unique, got {text!r}")
    return scales


def _parse_scale_sets(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_parse_scales(part) for part in text.split(";"))


def _parse_dim(text: str) -> int | None:
    if text.lower() == "none":
        return None
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"--dim must be an integer or 'none', got {text!r}")


def _load_vlad_dir(path: str | Path) -> list[VladDescriptor]:
    files = sorted(Path(path).glob("*.vlad"))
    if not files:
        raise FileNotFoundError(f"no .vlad files under {path}")
    return [load_vlad(f) for f in files]


def _feature_paths(manifest, layer_name, scale_ids) -> list[Path]:
    return [
        manifest.feature_path(image_id, layer_name, scale_id)
        for image_id in manifest.image_ids
        for scale_id in scale_ids
    ]


def _load_ground_truth(args, manifest):
    if args.protocol == "landmarks":
        if not args.gt_dir:
            raise ValueError("--gt-dir is required with --protocol landmarks")
        return load_oxford_ground_truth(args.gt_dir)
    return load_holidays_ground_truth(manifest)


_CONFIG_KEYS = frozenset(PipelineConfig.__dataclass_fields__)


def _load_config_doc(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return doc


def _coerce(value, kind, key: str):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r} has invalid value {value!r}")


def _sweep_config(args) -> PipelineConfig:
    """Sweep configuration: JSON file values with explicit flags winning."""
    doc = _load_config_doc(args.config) if args.config else {}

    def scalar(flag_value, key, kind, default):
        if flag_value is not None:
            return flag_value
        if key in doc:
            return _coerce(doc[key], kind, key)
        return default

    def off_switch(flag_value, key):
        # --no-<x> flags: passing the flag forces False and beats the file
        if flag_value:
            return False
        if key in doc:
            return _coerce(doc[key], bool, key)
        return True

    if args.layers is not None:
        layers = tuple(args.layers.split(","))
    elif "layers" in doc:
        value = doc["layers"]
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ValueError("config key 'layers' must be a list of layer names")
        layers = tuple(value)
    else:
        layers = ()

    if args.scale_sets is not None:
        scale_sets = _parse_scale_sets(args.scale_sets)
    elif "scale_sets" in doc:
        value = doc["scale_sets"]
        if not isinstance(value, list) or not all(isinstance(s, list) for s in value):
            raise ValueError("config key 'scale_sets' must be a list of lists")
        scale_sets = tuple(
            tuple(_coerce(s, int, "scale_sets") for s in ss) for ss in value
        )
    else:
        scale_sets = _parse_scale_sets("1;1,2")

    if args.dim is not None:
        dim_out = _parse_dim(args.dim)
    elif "dim_out" in doc:
        dim_out = None if doc["dim_out"] is None else _coerce(doc["dim_out"], int, "dim_out")
    else:
        dim_out = 128

    return PipelineConfig(
        layers=layers,
        scale_sets=scale_sets,
        k=scalar(args.k, "k", int, 100),
        seed=scalar(args.seed, "seed", int, 0),
        normalization=scalar(args.normalization, "normalization", str, "intra"),
        apply_global_l2=off_switch(args.no_global_l2, "apply_global_l2"),
        dim_out=dim_out,
        whiten=off_switch(args.no_whiten, "whiten"),
        project_l2=off_switch(args.no_project_l2, "project_l2"),
        whiten_epsilon=scalar(args.whiten_eps, "whiten_epsilon", float, 1e-9),
        max_iter=scalar(args.max_iter, "max_iter", int, 100),
        rel_tol=scalar(args.rel_tol, "rel_tol", float, 1e-4),
        sample_cap=scalar(args.sample_cap, "sample_cap", int, 500_000),
        ap_variant=scalar(args.ap_variant, "ap_variant", str, "discrete"),
    )


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    manifest = synth_dataset(
        args.seed,
        args.groups,
        args.images_per_group,
        args.side,
        args.depth,
        args.out,
        layer_name=args.layer,
        pattern_strength=args.pattern_strength,
    )
    _log(
        f"synth: {len(manifest.images)} images in {args.groups} groups "
        f"under {args.out}"
    )
    print(str(Path(args.out) / "manifest.json"))
    return 0


# ---------------------------------------------------------- train-vocab


def cmd_train_vocab(args) -> int:
    manifest = load_manifest(args.manifest)
    check_feature_files(manifest, (args.layer,), (args.scale,))
    params = {
        "layer": args.layer,
        "scale": args.scale,
        "k": args.k,
        "seed": args.seed,
        "max_iter": args.max_iter,
        "rel_tol": args.rel_tol,
        "sample_cap": args.sample_cap,
    }
    inputs = [Path(args.manifest)] + _feature_paths(manifest, args.layer, (args.scale,))
    meta = stage_meta("train-vocab", params, inputs)
    out = Path(args.out)
    sidecar = meta_path(out)
    if not args.force and outputs_cached(meta, [out], sidecar):
        _log(f"train-vocab: {out} is up to date, skipping")
        return 0
    config = PipelineConfig(
        k=args.k,
        seed=args.seed,
        max_iter=args.max_iter,
        rel_tol=args.rel_tol,
        sample_cap=args.sample_cap,
    )
    codebook = train_codebook_stage(manifest, args.layer, args.scale, config)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(codebook, out)
    write_meta(meta, sidecar)
    _log(
        f"train-vocab: k={codebook.k} dim={codebook.dim} "
        f"iterations={codebook.iterations_run} inertia={codebook.final_inertia:.6g}"
    )
    print(str(out))
    return 0


# --------------------------------------------------------------- encode


def cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    scales = _parse_scales(args.scales)
    if len(args.codebook) != len(scales):
        raise ValueError(
            f"{len(scales)} scale(s) but {len(args.codebook)} --codebook option(s); "
            f"pass one codebook per scale, in scale order"
        )
    check_feature_files(manifest, (args.layer,), scales)
    codebooks = {}
    for scale_id, cb_path in zip(scales, args.codebook):
        codebook = load_codebook(cb_path)
        if codebook.scale_id != scale_id:
            raise ValueError(
                f"{cb_path}: trained for scale {codebook.scale_id}, wanted {scale_id}"
            )
        if codebook.layer_name and codebook.layer_name != args.layer:
            raise ValueError(
                f"{cb_path}: trained on layer {codebook.layer_name!r}, wanted {args.layer!r}"
            )
        codebooks[scale_id] = codebook
    params = {
        "layer": args.layer,
        "scales": list(scales),
        "normalization": args.normalization,
        "global_l2": not args.no_global_l2,
    }
    inputs = (
        [Path(args.manifest)]
        + [Path(p) for p in args.codebook]
        + _feature_paths(manifest, args.layer, scales)
    )
    meta = stage_meta("encode", params, inputs)
    out_dir = Path(args.out_dir)
    outputs = [out_dir / f"{image_id}.vlad" for image_id in manifest.image_ids]
    sidecar = meta_path(out_dir)
    if not args.force and outputs_cached(meta, outputs, sidecar):
        _log(f"encode: {out_dir} is up to date, skipping")
        return 0
    config = PipelineConfig(
        normalization=args.normalization,
        apply_global_l2=not args.no_global_l2,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_id, out in zip(manifest.image_ids, outputs):
        if "/" in image_id or "\\" in image_id:
            raise ValueError(f"image id {image_id!r} is not filename-safe")
        vlad = encode_image(manifest, image_id, args.layer, scales, codebooks, config)
        save_vlad(vlad, out)
    write_meta(meta, sidecar)
    _log(f"encode: wrote {len(outputs)} descriptors to {out_dir}")
    print(str(out_dir))
    return 0


# -------------------------------------------------------------- fit-pca


def cmd_fit_pca(args) -> int:
    vlad_files = sorted(Path(args.vlads).glob("*.vlad"))
    if not vlad_files:
        raise FileNotFoundError(f"no .vlad files under {args.vlads}")
    params = {"dim": args.dim, "whiten_eps": args.whiten_eps}
    meta = stage_meta("fit-pca", params, vlad_files)
    out = Path(args.out)
    sidecar = meta_path(out)
    if not args.force and outputs_cached(meta, [out], sidecar):
        _log(f"fit-pca: {out} is up to date, skipping")
        return 0
    vlads = [load_vlad(f) for f in vlad_files]
    matrix = np.stack([v.values for v in vlads])
    projection = fit_pca_whiten(matrix, args.dim, whiten_epsilon=args.whiten_eps)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_projection(projection, out)
    write_meta(meta, sidecar)
    _log(
        f"fit-pca: {projection.dim_in} -> {projection.dim_out}, "
        f"top eigenvalue {projection.eigenvalues[0]:.6g}"
    )
    print(str(out))
    return 0


# -------------------------------------------------------------- project


def cmd_project(args) -> int:
    vlad_files = sorted(Path(args.vlads).glob("*.vlad"))
    if not vlad_files:
        raise FileNotFoundError(f"no .vlad files under {args.vlads}")
    params = {"whiten": not args.no_whiten, "l2": not args.no_l2}
    inputs = list(vlad_files) + [Path(args.projection)]
    meta = stage_meta("project", params, inputs)
    out = Path(args.out)
    sidecar = meta_path(out)
    if not args.force and outputs_cached(meta, [out], sidecar):
        _log(f"project: {out} is up to date, skipping")
        return 0
    vlads = [load_vlad(f) for f in vlad_files]
    projection = load_projection(args.projection)
    matrix = np.stack([v.values for v in vlads])
    projected = project_many(
        projection, matrix, whiten=not args.no_whiten, l2=not args.no_l2
    )
    index = build_index([v.image_id for v in vlads], projected)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_descriptor_matrix(index, out)
    write_meta(meta, sidecar)
    _log(f"project: {index.count} descriptors at dim {index.dim}")
    print(str(out))
    return 0


# ---------------------------------------------------------------- index


def cmd_index(args) -> int:
    vlad_files = sorted(Path(args.vlads).glob("*.vlad"))
    if not vlad_files:
        raise FileNotFoundError(f"no .vlad files under {args.vlads}")
    meta = stage_meta("index", {}, vlad_files)
    out = Path(args.out)
    sidecar = meta_path(out)
    if not args.force and outputs_cached(meta, [out], sidecar):
        _log(f"index: {out} is up to date, skipping")
        return 0
    index = index_from_vlads([load_vlad(f) for f in vlad_files])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_descriptor_matrix(index, out)
    write_meta(meta, sidecar)
    _log(f"index: {index.count} descriptors at dim {index.dim}")
    print(str(out))
    return 0


# ---------------------------------------------------------------- query


def cmd_query(args) -> int:
    index = load_descriptor_matrix(args.index)
    ranked = query_by_id(
        index,
        args.query_id,
        top_k=args.top_k,
        exclude_self=not args.include_self,
        exclude=frozenset(args.exclude),
    )
    for rank, (image_id, dist) in enumerate(
        zip(ranked.image_ids, ranked.distances), 1
    ):
        print(f"{rank}\t{image_id}\t{dist:.6f}")
    return 0


# ------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    index = load_descriptor_matrix(args.index)
    manifest = load_manifest(args.manifest)
    ground_truth = _load_ground_truth(args, manifest)
    result = evaluate_index(index, ground_truth, variant=args.ap_variant)
    header = "dataset,descriptors,ap_variant,queries,skipped,map"
    row = (
        f"{manifest.dataset_name},{Path(args.index).name},{args.ap_variant},"
        f"{len(result.per_query)},{len(result.skipped)},{result.mean_ap:.4f}"
    )
    print(f"{result.mean_ap:.4f}")
    print(row)
    if args.csv:
        Path(args.csv).write_text(f"{header}\n{row}\n", encoding="utf-8")
        _log(f"evaluate: wrote {args.csv}")
    return 0


# ---------------------------------------------------------------- sweep


def cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _sweep_config(args)
    ground_truth = _load_ground_truth(args, manifest)
    report = sweep(manifest, ground_truth, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(report.to_csv(), encoding="utf-8")
    (out_dir / "sweep.dat").write_text(report.to_gnuplot(), encoding="utf-8")
    meta = {
        "stage": "sweep",
        "config": config.to_json_dict(),
        "config_digest": report.config_digest,
        "inputs": [
            {"name": Path(args.manifest).name, "sha256": file_digest(args.manifest)}
        ],
    }
    write_meta(meta, out_dir / "sweep.meta.json")
    print(report.to_csv(), end="")
    return 0


# ------------------------------------------------------------------ viz


def cmd_viz_correspondence(args) -> int:
    manifest = load_manifest(args.manifest)
    sources = load_patch_sources(manifest, args.layer, args.scale)
    mosaic = correspondence_mosaic(
        args.target, sources, args.k_nn, exclude_self=not args.include_self
    )
    write_ppm(mosaic, args.out)
    _log(f"viz-correspondence: wrote {args.out}")
    print(str(args.out))
    return 0


def cmd_viz_clusters(args) -> int:
    manifest = load_manifest(args.manifest)
    sources = load_patch_sources(manifest, args.layer, args.scale)
    grid = patch_clusters(sources, args.rows, args.k_nn, args.seed)
    write_ppm(grid, args.out)
    _log(f"viz-clusters: wrote {args.out}")
    print(str(args.out))
    return 0


# ----------------------------------------------------------- arg wiring


def _add_kmeans_args(p: argparse.ArgumentParser, *, config_backed: bool = False) -> None:
    # config-backed commands leave the default to the --config file merge
    def default(value):
        return None if config_backed else value

    p.add_argument("--k", type=int, default=default(100), help="codebook size (default 100)")
    p.add_argument("--seed", type=int, default=default(0), help="training seed (default 0)")
    p.add_argument("--max-iter", type=int, default=default(100), help="default 100")
    p.add_argument("--rel-tol", type=float, default=default(1e-4), help="default 1e-4")
    p.add_argument(
        "--sample-cap",
        type=int,
        default=default(500_000),
        help="training subsample cap (default 500000)",
    )


def _add_protocol_args(p: argparse.ArgumentParser, *, config_backed: bool = False) -> None:
    p.add_argument(
        "--protocol",
        choices=("groups", "landmarks"),
        default="groups",
        help="ground truth protocol (default groups)",
    )
    p.add_argument("--gt-dir", help="landmark query/good/ok/junk directory")
    p.add_argument(
        "--ap-variant",
        choices=("discrete", "trapezoid"),
        default=None if config_backed else "discrete",
        help="average precision variant (default discrete)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="vladbench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vladbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", type=int, default=20)
    p.add_argument("--images-per-group", type=int, default=4)
    p.add_argument("--side", type=int, default=6)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--layer", default="conv3")
    p.add_argument(
        "--pattern-strength",
        type=float,
        default=3.0,
        help="0 disables planted patterns (pure-noise control)",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-vocab", help="train a codebook for one layer/scale")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--scale", type=int, default=1)
    _add_kmeans_args(p)
    p.add_argument("--out", required=True, help="output .cbk1 path")
    p.add_argument("--force", action="store_true", help="recompute even if cached")
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("encode", help="encode every image to a .vlad file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--scales", default="1", help="e.g. '1' or '1,2'")
    p.add_argument(
        "--codebook",
        action="append",
        required=True,
        help="one .cbk1 per scale, repeated in scale order",
    )
    p.add_argument("--normalization", choices=("intra", "ssr"), default="intra")
    p.add_argument("--no-global-l2", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fit-pca", help="fit the whitening projection on .vlad files")
    p.add_argument("--vlads", required=True, help="directory of .vlad files")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--whiten-eps", type=float, default=1e-9)
    p.add_argument("--out", required=True, help="output .prj1 path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("project", help="project .vlad files to a .cds1 matrix")
    p.add_argument("--vlads", required=True)
    p.add_argument("--projection", required=True)
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--no-l2", action="store_true")
    p.add_argument("--out", required=True, help="output .cds1 path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("index", help="consolidate .vlad files into a .cds1 matrix")
    p.add_argument("--vlads", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank the database for one query id")
    p.add_argument("--index", required=True, help=".cds1 descriptor matrix")
    p.add_argument("--query-id", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--exclude", action="append", default=[])
    p.add_argument("--include-self", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="mean average precision of an index")
    p.add_argument("--index", required=True, help=".cds1 descriptor matrix")
    p.add_argument("--manifest", required=True)
    _add_protocol_args(p)
    p.add_argument("--csv", help="also write the CSV row (with header) here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate layer x scale-set combinations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON pipeline config; explicit flags override it")
    p.add_argument("--layers", default=None, help="comma list; default all layers")
    p.add_argument("--scale-sets", default=None, help="e.g. '1;1,2' (the default)")
    _add_kmeans_args(p, config_backed=True)
    p.add_argument("--normalization", choices=("intra", "ssr"), default=None)
    p.add_argument("--no-global-l2", action="store_true")
    p.add_argument("--dim", default=None, help="int or 'none' (default 128)")
    p.add_argument("--whiten-eps", type=float, default=None)
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--no-project-l2", action="store_true")
    _add_protocol_args(p, config_backed=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser(
        "viz-correspondence", help="rebuild an image from nearest database patches"
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--target", required=True, help="image id to rebuild")
    p.add_argument("--k-nn", type=int, default=5)
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=cmd_viz_correspondence)

    p = sub.add_parser("viz-clusters", help="reference patches beside their neighbors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--k-nn", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=cmd_viz_clusters)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"vladbench: input format error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"vladbench: missing input: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, ArithmeticError) as exc:
        print(f"vladbench: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
