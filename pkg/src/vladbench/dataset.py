"""Dataset manifests and the synthetic retrieval dataset generator.

A dataset on disk is a directory with a ``manifest.json`` naming every image
and its per-layer, per-scale feature map files.  All paths inside the
manifest are relative to the manifest's directory, so a dataset can be moved
or mounted anywhere.

Manifest schema (JSON, schema_version 1)::

    {
      "schema_version": 1,
      "dataset_name": "synth-seed7",
      "ground_truth": "ground_truth.json",          // optional
      "images": [
        {
          "image_id": "100000",
          "feature_maps": {"conv3": {"1": "features/100000_conv3_s1.cfmp"}},
          "image_paths": {"1": "images/100000_s1.ppm"}   // optional, per scale
        },
        ...
      ]
    }

Ground truth (when present) is a JSON file with retrieval groups; the first
id in each group is the query and the rest are its positives::

    {"schema_version": 1, "groups": [["100000", "100001", "100002"], ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .features import FeatureMap, write_cfmp
from .ppm import write_ppm

MANIFEST_SCHEMA_VERSION = 1
GROUND_TRUTH_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ImageRecord:
    """One image's entry in a manifest; paths are manifest-relative."""

    image_id: str
    feature_maps: dict[str, dict[int, str]]
    image_paths: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    root: Path
    images: tuple[ImageRecord, ...]
    ground_truth: str | None = None

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError("manifest must list at least one image")
        ids = [rec.image_id for rec in self.images]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate image ids in manifest: {dupes}")

    @property
    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.images]

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(f"image id {image_id!r} not in manifest")

    def layers(self) -> list[str]:
        names: set[str] = set()
        for rec in self.images:
            names.update(rec.feature_maps)
        return sorted(names)

    def feature_path(self, image_id: str, layer_name: str, scale_id: int) -> Path:
        rec = self.record(image_id)
        try:
            rel = rec.feature_maps[layer_name][scale_id]
        except KeyError:
            raise KeyError(
                f"image {image_id!r} has no feature map for layer "
                f"{layer_name!r} at scale {scale_id}"
            ) from None
        return self.root / rel

    def image_path(self, image_id: str, scale_id: int) -> Path:
        rec = self.record(image_id)
        if scale_id not in rec.image_paths:
            raise KeyError(f"image {image_id!r} has no source image at scale {scale_id}")
        return self.root / rec.image_paths[scale_id]

    def ground_truth_path(self) -> Path | None:
        if self.ground_truth is None:
            return None
        return self.root / self.ground_truth

    def missing_feature_files(
        self, layer_name: str, scale_ids: tuple[int, ...]
    ) -> list[str]:
        """All absent feature files for a layer/scale selection, in one pass."""
        missing: list[str] = []
        for rec in self.images:
            for scale_id in scale_ids:
                rel = rec.feature_maps.get(layer_name, {}).get(scale_id)
                if rel is None or not (self.root / rel).is_file():
                    missing.append(
                        f"{rec.image_id} layer={layer_name} scale={scale_id}"
                    )
        return missing


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise FormatError(message)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest.json; raises FormatError when malformed."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict), f"{path}: manifest must be a JSON object")
    _require(
        doc.get("schema_version") == MANIFEST_SCHEMA_VERSION,
        f"{path}: unsupported manifest schema_version {doc.get('schema_version')!r}",
    )
    name = doc.get("dataset_name")
    _require(isinstance(name, str) and bool(name), f"{path}: missing dataset_name")
    images_doc = doc.get("images")
    _require(
        isinstance(images_doc, list) and bool(images_doc),
        f"{path}: images must be a non-empty list",
    )
    records = []
    for entry in images_doc:
        _require(isinstance(entry, dict), f"{path}: image entry must be an object")
        image_id = entry.get("image_id")
        _require(
            isinstance(image_id, str) and bool(image_id),
            f"{path}: image entry missing image_id",
        )
        maps_doc = entry.get("feature_maps", {})
        _require(
            isinstance(maps_doc, dict),
            f"{path}: feature_maps of {image_id} must be an object",
        )
        feature_maps: dict[str, dict[int, str]] = {}
        for layer_name, per_scale in maps_doc.items():
            _require(
                isinstance(per_scale, dict),
                f"{path}: feature_maps[{layer_name}] of {image_id} must be an object",
            )
            scales: dict[int, str] = {}
            for scale_key, rel in per_scale.items():
                _require(
                    isinstance(rel, str) and str(scale_key).isdigit(),
                    f"{path}: bad feature map entry for {image_id}/{layer_name}",
                )
                scales[int(scale_key)] = rel
            feature_maps[layer_name] = scales
        paths_doc = entry.get("image_paths", {})
        _require(
            isinstance(paths_doc, dict),
            f"{path}: image_paths of {image_id} must be an object",
        )
        image_paths = {}
        for scale_key, rel in paths_doc.items():
            _require(
                isinstance(rel, str) and str(scale_key).isdigit(),
                f"{path}: bad image path entry for {image_id}",
            )
            image_paths[int(scale_key)] = rel
        records.append(
            ImageRecord(
                image_id=image_id, feature_maps=feature_maps, image_paths=image_paths
            )
        )
    ground_truth = doc.get("ground_truth")
    _require(
        ground_truth is None or isinstance(ground_truth, str),
        f"{path}: ground_truth must be a relative path string",
    )
    try:
        return DatasetManifest(
            dataset_name=name,
            root=path.parent,
            images=tuple(records),
            ground_truth=ground_truth,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as canonical JSON (sorted keys, stable bytes)."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "dataset_name": manifest.dataset_name,
        "images": [
            {
                "image_id": rec.image_id,
                "feature_maps": {
                    layer: {str(s): rel for s, rel in sorted(per_scale.items())}
                    for layer, per_scale in sorted(rec.feature_maps.items())
                },
                "image_paths": {
                    str(s): rel for s, rel in sorted(rec.image_paths.items())
                },
            }
            for rec in manifest.images
        ],
    }
    if manifest.ground_truth is not None:
        doc["ground_truth"] = manifest.ground_truth
    text = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def save_ground_truth_groups(groups: list[list[str]], path: str | Path) -> None:
    doc = {"schema_version": GROUND_TRUTH_SCHEMA_VERSION, "groups": groups}
    text = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_ground_truth_groups(path: str | Path) -> list[list[str]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict), f"{path}: ground truth must be a JSON object")
    _require(
        doc.get("schema_version") == GROUND_TRUTH_SCHEMA_VERSION,
        f"{path}: unsupported ground truth schema_version",
    )
    groups = doc.get("groups")
    _require(isinstance(groups, list) and bool(groups), f"{path}: groups missing")
    out: list[list[str]] = []
    for group in groups:
        _require(
            isinstance(group, list)
            and bool(group)
            and all(isinstance(i, str) for i in group),
            f"{path}: each group must be a non-empty list of image ids",
        )
        out.append(list(group))
    return out


def _render_image(values: np.ndarray, patch_pixels: int) -> np.ndarray:
    """Map a (side, side, depth) tensor to an RGB image, one patch per cell."""
    side, _, depth = values.shape
    channels = np.stack(
        [values[:, :, c % depth] for c in range(3)], axis=-1
    ).astype(np.float64)
    low = channels.min()
    span = channels.max() - low
    if span == 0.0:
        span = 1.0
    pixels = np.clip((channels - low) / span * 255.0, 0.0, 255.0)
    pixels = np.round(pixels).astype(np.uint8)
    return np.repeat(np.repeat(pixels, patch_pixels, axis=0), patch_pixels, axis=1)


def synth_dataset(
    seed: int,
    num_groups: int,
    images_per_group: int,
    side: int,
    depth: int,
    out_dir: str | Path,
    *,
    layer_name: str = "conv3",
    pattern_strength: float = 3.0,
    patterns_per_image: int = 3,
    noise_scale: float = 1.0,
    patch_pixels: int = 8,
) -> DatasetManifest:
    """Generate a self-contained synthetic dataset under ``out_dir``.

    Images in the same group share ``patterns_per_image`` planted descriptor
    patterns, written at per-image random grid cells over a background of
    Gaussian noise, so group members are retrievable by local-feature
    aggregation while unrelated images are not.  ``pattern_strength 0.0``
    yields a pure-noise control with the same structure.

    Every image gets a scale-1 map, a scale-2 map (its 2x nearest-neighbor
    upsample), and rendered PPM images at both scales.  Image ids follow the
    group-of-100 convention (``id // 100`` identifies the group).  Output is
    a pure function of the arguments: reruns produce byte-identical files.
    """
    if num_groups < 1 or images_per_group < 1:
        raise ValueError("num_groups and images_per_group must be >= 1")
    if images_per_group > 100:
        raise ValueError("images_per_group above 100 breaks the id convention")
    if side < 1 or depth < 1:
        raise ValueError("side and depth must be >= 1")

    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records: list[ImageRecord] = []
    groups: list[list[str]] = []
    n_planted = min(patterns_per_image, side * side)
    for group_index in range(num_groups):
        patterns = rng.normal(size=(n_planted, depth))
        norms = np.linalg.norm(patterns, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        patterns = patterns / norms * pattern_strength
        group_ids: list[str] = []
        for member in range(images_per_group):
            image_id = str(100_000 + group_index * 100 + member)
            values = rng.normal(0.0, noise_scale, size=(side, side, depth))
            cells = rng.choice(side * side, size=n_planted, replace=False)
            for pattern, cell in zip(patterns, cells):
                ci, cj = divmod(int(cell), side)
                values[ci, cj] = pattern + rng.normal(0.0, 0.1, size=depth)
            map1 = FeatureMap(
                image_id=image_id,
                layer_name=layer_name,
                scale_id=1,
                side=side,
                depth=depth,
                values=values.astype(np.float32),
            )
            up = np.repeat(np.repeat(map1.values, 2, axis=0), 2, axis=1)
            map2 = FeatureMap(
                image_id=image_id,
                layer_name=layer_name,
                scale_id=2,
                side=side * 2,
                depth=depth,
                values=up,
            )
            feature_maps: dict[int, str] = {}
            image_paths: dict[int, str] = {}
            for fmap in (map1, map2):
                rel = f"features/{image_id}_{layer_name}_s{fmap.scale_id}.cfmp"
                write_cfmp(fmap, out_dir / rel)
                feature_maps[fmap.scale_id] = rel
                rel_img = f"images/{image_id}_s{fmap.scale_id}.ppm"
                write_ppm(_render_image(fmap.values, patch_pixels), out_dir / rel_img)
                image_paths[fmap.scale_id] = rel_img
            records.append(
                ImageRecord(
                    image_id=image_id,
                    feature_maps={layer_name: feature_maps},
                    image_paths=image_paths,
                )
            )
            group_ids.append(image_id)
        groups.append(group_ids)

    save_ground_truth_groups(groups, out_dir / "ground_truth.json")
    manifest = DatasetManifest(
        dataset_name=f"synth-seed{seed}",
        root=out_dir,
        images=tuple(records),
        ground_truth="ground_truth.json",
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
