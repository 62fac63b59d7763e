"""End-to-end pipeline stages, their configuration, and the layer sweep.

A full run is: train one codebook per (layer, scale) on the dataset's own
descriptors, encode every image (per-scale VLAD, block or signed-sqrt
normalization, multiscale concatenation, final global L2), optionally fit
and apply a whitening projection, build the exact index, and score mean AP
against the dataset's ground truth.

Every stage is a pure function of its inputs plus a ``PipelineConfig``, so
reruns are byte-identical.  Stage outputs get a ``<name>.meta.json`` sidecar
recording the stage parameters (all defaults materialized) and the SHA-256
of every input file; a stage whose outputs exist with a matching sidecar can
be skipped.  Sidecars contain no machine-local paths, so identical runs in
different directories produce identical bytes throughout.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .codebook import Codebook, train_codebook
from .dataset import DatasetManifest
from .errors import FormatError
from .evaluation import (
    AP_VARIANTS,
    EvaluationResult,
    GroundTruth,
    evaluate_index,
)
from .features import extract_descriptors, normalize_descriptors, read_cfmp
from .projection import (
    DEFAULT_WHITEN_EPSILON,
    Projection,
    fit_pca_whiten,
    project_many,
)
from .retrieval import RetrievalIndex, build_index, index_from_vlads
from .vlad import (
    VladDescriptor,
    concat_multiscale,
    encode_vlad,
    global_l2,
    intra_normalize,
    ssr_normalize,
)

NORMALIZATION_MODES = ("intra", "ssr")

FORMAT_VERSIONS = {"cfmp": 1, "cbk1": 1, "vlad": 1, "prj1": 1, "cds1": 1}


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a retrieval run, with the defaults materialized.

    ``layers`` empty means every layer in the manifest.  ``dim_out`` of
    ``None`` skips the projection stage.  ``scale_sets`` is the list of
    scale combinations a sweep evaluates; single runs use one entry.
    """

    layers: tuple[str, ...] = ()
    scale_sets: tuple[tuple[int, ...], ...] = ((1,),)
    k: int = 100
    seed: int = 0
    normalization: str = "intra"
    apply_global_l2: bool = True
    dim_out: int | None = 128
    whiten: bool = True
    project_l2: bool = True
    whiten_epsilon: float = DEFAULT_WHITEN_EPSILON
    max_iter: int = 100
    rel_tol: float = 1e-4
    sample_cap: int = 500_000
    ap_variant: str = "discrete"

    def __post_init__(self) -> None:
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(
                f"normalization must be one of {NORMALIZATION_MODES}, "
                f"got {self.normalization!r}"
            )
        if self.ap_variant not in AP_VARIANTS:
            raise ValueError(f"ap_variant must be one of {AP_VARIANTS}")
        if self.dim_out is not None and self.dim_out < 1:
            raise ValueError(f"dim_out must be >= 1 or None, got {self.dim_out}")
        for scales in self.scale_sets:
            if not scales or list(scales) != sorted(set(scales)):
                raise ValueError(f"scale sets must be ascending and non-empty: {scales}")
        object.__setattr__(
            self,
            "scale_sets",
            tuple(tuple(int(s) for s in ss) for ss in self.scale_sets),
        )
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["layers"] = list(self.layers)
        doc["scale_sets"] = [list(ss) for ss in self.scale_sets]
        return doc

    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_json_dict()))


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_meta(stage: str, params: dict, inputs: list[Path]) -> dict:
    """Cache key for one stage: parameters plus input digests, no paths."""
    return {
        "stage": stage,
        "format_versions": FORMAT_VERSIONS,
        "params": params,
        "inputs": [
            {"name": Path(p).name, "sha256": file_digest(p)} for p in inputs
        ],
    }


def meta_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".meta.json")


def write_meta(meta: dict, sidecar: str | Path) -> None:
    Path(sidecar).write_text(canonical_json(meta), encoding="utf-8")


def outputs_cached(meta: dict, outputs: list[Path], sidecar: str | Path) -> bool:
    """True when every output exists and the recorded sidecar matches."""
    if not outputs:
        return False
    for out in outputs:
        if not Path(out).exists():
            return False
    sidecar = Path(sidecar)
    if not sidecar.exists():
        return False
    try:
        recorded = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    return recorded == meta


def gather_descriptors(
    manifest: DatasetManifest, layer_name: str, scale_id: int
) -> np.ndarray:
    """All images' L2-normalized descriptors for one layer/scale, stacked
    in manifest order."""
    blocks = []
    for image_id in manifest.image_ids:
        fmap = read_cfmp(manifest.feature_path(image_id, layer_name, scale_id))
        blocks.append(normalize_descriptors(extract_descriptors(fmap)).vectors)
    return np.concatenate(blocks).astype(np.float64)


def check_feature_files(
    manifest: DatasetManifest, layers: tuple[str, ...], scale_ids: tuple[int, ...]
) -> None:
    """Fail up front with the complete list of missing feature files."""
    missing: list[str] = []
    for layer_name in layers:
        missing.extend(manifest.missing_feature_files(layer_name, scale_ids))
    if missing:
        raise FileNotFoundError(
            f"{len(missing)} feature file(s) missing: " + "; ".join(missing)
        )


def train_codebook_stage(
    manifest: DatasetManifest,
    layer_name: str,
    scale_id: int,
    config: PipelineConfig,
) -> Codebook:
    descriptors = gather_descriptors(manifest, layer_name, scale_id)
    return train_codebook(
        descriptors,
        config.k,
        config.seed,
        max_iter=config.max_iter,
        rel_tol=config.rel_tol,
        sample_cap=config.sample_cap,
        layer_name=layer_name,
        scale_id=scale_id,
    )


def encode_image(
    manifest: DatasetManifest,
    image_id: str,
    layer_name: str,
    scale_ids: tuple[int, ...],
    codebooks: dict[int, Codebook],
    config: PipelineConfig,
) -> VladDescriptor:
    """One image's final descriptor for one layer and scale combination."""
    per_scale = []
    for scale_id in scale_ids:
        fmap = read_cfmp(manifest.feature_path(image_id, layer_name, scale_id))
        descriptors = normalize_descriptors(extract_descriptors(fmap))
        raw = encode_vlad(descriptors, codebooks[scale_id])
        if config.normalization == "intra":
            per_scale.append(intra_normalize(raw))
        else:
            per_scale.append(ssr_normalize(raw))
    combined = concat_multiscale(per_scale)
    if config.apply_global_l2:
        combined = global_l2(combined)
    return combined


def encode_all(
    manifest: DatasetManifest,
    layer_name: str,
    scale_ids: tuple[int, ...],
    codebooks: dict[int, Codebook],
    config: PipelineConfig,
) -> list[VladDescriptor]:
    return [
        encode_image(manifest, image_id, layer_name, scale_ids, codebooks, config)
        for image_id in manifest.image_ids
    ]


def fit_projection_stage(
    vlads: list[VladDescriptor], config: PipelineConfig
) -> Projection:
    if config.dim_out is None:
        raise ValueError("projection stage called with dim_out=None")
    matrix = np.stack([v.values for v in vlads])
    return fit_pca_whiten(
        matrix, config.dim_out, whiten_epsilon=config.whiten_epsilon
    )


def build_index_stage(
    vlads: list[VladDescriptor],
    projection: Projection | None,
    config: PipelineConfig,
) -> RetrievalIndex:
    if projection is None:
        return index_from_vlads(vlads)
    matrix = np.stack([v.values for v in vlads])
    projected = project_many(
        projection, matrix, whiten=config.whiten, l2=config.project_l2
    )
    return build_index([v.image_id for v in vlads], projected)


def run_retrieval_config(
    manifest: DatasetManifest,
    ground_truth: GroundTruth,
    layer_name: str,
    scale_ids: tuple[int, ...],
    config: PipelineConfig,
    *,
    codebook_cache: dict[tuple[str, int], Codebook] | None = None,
) -> EvaluationResult:
    """Train, encode, project, index, and evaluate one configuration."""
    check_feature_files(manifest, (layer_name,), scale_ids)
    codebooks: dict[int, Codebook] = {}
    for scale_id in scale_ids:
        key = (layer_name, scale_id)
        if codebook_cache is not None and key in codebook_cache:
            codebooks[scale_id] = codebook_cache[key]
            continue
        codebooks[scale_id] = train_codebook_stage(
            manifest, layer_name, scale_id, config
        )
        if codebook_cache is not None:
            codebook_cache[key] = codebooks[scale_id]
    vlads = encode_all(manifest, layer_name, scale_ids, codebooks, config)
    projection = (
        fit_projection_stage(vlads, config) if config.dim_out is not None else None
    )
    index = build_index_stage(vlads, projection, config)
    return evaluate_index(index, ground_truth, variant=config.ap_variant)


@dataclass(frozen=True)
class SweepRow:
    layer_name: str
    scale_ids: tuple[int, ...]
    normalization: str
    dim_out: int | None
    n_queries: int
    mean_ap: float


@dataclass(frozen=True, eq=False)
class SweepReport:
    rows: tuple[SweepRow, ...]
    config_digest: str

    def to_csv(self) -> str:
        lines = ["layer,scales,normalization,dim,queries,map"]
        for row in self.rows:
            lines.append(
                f"{row.layer_name},{_scales_label(row.scale_ids)},"
                f"{_norm_label(row.normalization)},{_dim_label(row.dim_out)},"
                f"{row.n_queries},{row.mean_ap:.4f}"
            )
        return "\n".join(lines) + "\n"

    def to_gnuplot(self) -> str:
        """Whitespace-separated columns with a comment header, one row per
        configuration, ready for ``plot ... using`` directives."""
        lines = [
            f"# config {self.config_digest}",
            "# layer scales normalization dim queries map",
        ]
        for row in self.rows:
            lines.append(
                f"{row.layer_name} {_scales_label(row.scale_ids)} "
                f"{_norm_label(row.normalization)} {_dim_label(row.dim_out)} "
                f"{row.n_queries} {row.mean_ap:.4f}"
            )
        return "\n".join(lines) + "\n"


def _scales_label(scale_ids: tuple[int, ...]) -> str:
    return "+".join(str(s) for s in scale_ids)


def _dim_label(dim_out: int | None) -> str:
    return "none" if dim_out is None else str(dim_out)


def _norm_label(normalization: str) -> str:
    return normalization


def sweep(
    manifest: DatasetManifest,
    ground_truth: GroundTruth,
    config: PipelineConfig,
) -> SweepReport:
    """Evaluate every (layer, scale set) combination of the config.

    Rows come out in input order: layers outermost, scale sets within.
    Codebooks are trained once per (layer, scale) and shared between scale
    sets.  Missing feature files for any combination abort the whole sweep
    before any training starts, listing every absent file.
    """
    layers = config.layers or tuple(manifest.layers())
    if not layers:
        raise ValueError("no layers to sweep")
    all_scales = tuple(sorted({s for ss in config.scale_sets for s in ss}))
    check_feature_files(manifest, layers, all_scales)
    cache: dict[tuple[str, int], Codebook] = {}
    rows = []
    for layer_name in layers:
        for scale_ids in config.scale_sets:
            print(
                f"sweep: layer={layer_name} scales={_scales_label(scale_ids)}",
                file=sys.stderr,
            )
            result = run_retrieval_config(
                manifest,
                ground_truth,
                layer_name,
                scale_ids,
                config,
                codebook_cache=cache,
            )
            rows.append(
                SweepRow(
                    layer_name=layer_name,
                    scale_ids=scale_ids,
                    normalization=config.normalization,
                    dim_out=config.dim_out,
                    n_queries=len(result.per_query),
                    mean_ap=result.mean_ap,
                )
            )
    return SweepReport(rows=tuple(rows), config_digest=config.digest())


def single_scale_config(config: PipelineConfig, scale_ids: tuple[int, ...]) -> PipelineConfig:
    return replace(config, scale_sets=(tuple(scale_ids),))
