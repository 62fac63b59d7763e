"""Run a catalog network over images and write feature maps + manifest.

The export loop is batch inference with forward hooks on the tapped
modules.  For every (image, layer, scale) it writes one ``.cfmp`` file with
the post-nonlinearity activations in row-major (row, column, channel)
order, plus the warped square input image as a ``.ppm`` per scale, and
finally a ``manifest.json`` tying everything together.  Any activation
whose grid does not match the catalog aborts the run before a byte of that
layer is written.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .catalog import (
    CHANNEL_MEAN,
    CHANNEL_STD,
    SCALE_SIDES,
    LayerTap,
    build_model,
    expected_side,
    resolve_taps,
)
from .formats import manifest_doc, write_cfmp, write_manifest, write_ppm


@dataclass(frozen=True)
class ExportSpec:
    """Everything one export run needs; paths resolve at run time."""

    model_name: str
    image_paths: tuple[Path, ...]
    out_dir: Path
    layer_names: tuple[str, ...] = ()  # empty selects the whole catalog
    scale_ids: tuple[int, ...] = (1, 2)
    weights: str = "pretrained"
    seed: int = 0
    batch_size: int = 8
    device: str = "cpu"
    dataset_name: str = ""

    def __post_init__(self) -> None:
        if not self.image_paths:
            raise ValueError("no images to export")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        bad = [s for s in self.scale_ids if s not in SCALE_SIDES]
        if bad or not self.scale_ids:
            raise ValueError(
                f"scale ids must be a non-empty subset of {sorted(SCALE_SIDES)}, "
                f"got {list(self.scale_ids)}"
            )
        if list(self.scale_ids) != sorted(set(self.scale_ids)):
            raise ValueError(f"scale ids must be ascending and unique: {self.scale_ids}")
        ids = [p.stem for p in self.image_paths]
        if any(not i for i in ids):
            raise ValueError("every image file needs a non-empty stem as its id")
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate image ids: {dupes}")
        resolve_taps(self.model_name, self.layer_names)  # fail early on names

    @property
    def image_ids(self) -> list[str]:
        return [p.stem for p in self.image_paths]


@dataclass
class _Capture:
    """Forward-hook sink: last seen output per tapped layer."""

    outputs: dict[str, torch.Tensor] = field(default_factory=dict)

    def hook(self, tap: LayerTap):
        def _store(_module, _inputs, output, name=tap.name):
            self.outputs[name] = output.detach()

        return _store


def load_warped(path: Path, side: int) -> np.ndarray:
    """Source image warped to a side x side square, (h, w, 3) uint8.

    Warping is a direct bilinear resize; aspect ratio is not preserved and
    nothing is cropped.
    """
    try:
        with Image.open(path) as img:
            warped = img.convert("RGB").resize((side, side), Image.Resampling.BILINEAR)
            return np.asarray(warped, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: cannot decode image: {exc}") from exc


def _to_batch(arrays: list[np.ndarray], device: str) -> torch.Tensor:
    stack = np.stack(arrays).astype(np.float32) / 255.0
    stack = (stack - np.asarray(CHANNEL_MEAN, dtype=np.float32)) / np.asarray(
        CHANNEL_STD, dtype=np.float32
    )
    return torch.from_numpy(stack.transpose(0, 3, 1, 2)).to(device)


def _check_shape(tap: LayerTap, scale_id: int, output: torch.Tensor) -> None:
    want_side = expected_side(tap, scale_id)
    want = (tap.depth, want_side, want_side)
    got = tuple(output.shape[1:])
    if got != want:
        raise ValueError(
            f"layer {tap.name!r} at scale {scale_id}: expected shape "
            f"{want[1]}x{want[2]}x{want[0]}, got {got[1]}x{got[2]}x{got[0]}"
        )


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def export(spec: ExportSpec, model: torch.nn.Module | None = None) -> Path:
    """Run the export; returns the manifest path.

    A prebuilt ``model`` skips construction (and the pretrained-weight
    download), which also lets callers reuse one network across runs.
    """
    taps = resolve_taps(spec.model_name, spec.layer_names)
    if model is None:
        model = build_model(spec.model_name, spec.weights, spec.seed)
    model = model.to(spec.device)

    capture = _Capture()
    handles = [
        dict(model.named_modules())[tap.module].register_forward_hook(
            capture.hook(tap)
        )
        for tap in taps
    ]

    out_dir = Path(spec.out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = {
        image_id: {"image_id": image_id, "feature_maps": {}, "image_paths": {}}
        for image_id in spec.image_ids
    }
    try:
        for scale_id in spec.scale_ids:
            side_in = SCALE_SIDES[scale_id]
            for tap in taps:
                (out_dir / "features" / tap.name / f"s{scale_id}").mkdir(
                    parents=True, exist_ok=True
                )
            done = 0
            for start in range(0, len(spec.image_paths), spec.batch_size):
                batch_paths = spec.image_paths[start : start + spec.batch_size]
                warped = [load_warped(p, side_in) for p in batch_paths]
                for path, image in zip(batch_paths, warped):
                    rel = f"images/{path.stem}_s{scale_id}.ppm"
                    write_ppm(image, out_dir / rel)
                    records[path.stem]["image_paths"][str(scale_id)] = rel
                with torch.no_grad():
                    model(_to_batch(warped, spec.device))
                for tap in taps:
                    output = capture.outputs[tap.name]
                    _check_shape(tap, scale_id, output)
                    grids = output.cpu().numpy()
                    for row, path in enumerate(batch_paths):
                        # (channel, row, col) -> row-major (row, col, channel)
                        values = np.transpose(grids[row], (1, 2, 0))
                        rel = f"features/{tap.name}/s{scale_id}/{path.stem}.cfmp"
                        write_cfmp(
                            out_dir / rel,
                            path.stem,
                            tap.name,
                            scale_id,
                            expected_side(tap, scale_id),
                            tap.depth,
                            values,
                        )
                        records[path.stem]["feature_maps"].setdefault(tap.name, {})[
                            str(scale_id)
                        ] = rel
                done += len(batch_paths)
                _log(
                    f"export: {spec.model_name} scale {scale_id}: "
                    f"{done}/{len(spec.image_paths)} images"
                )
    finally:
        for handle in handles:
            handle.remove()

    doc = manifest_doc(
        dataset_name=spec.dataset_name or out_dir.name,
        records=[records[i] for i in spec.image_ids],
        preprocessing={
            "model": spec.model_name,
            "weights": spec.weights,
            "resize": "warp-square-bilinear",
            "scale_sides": {str(s): SCALE_SIDES[s] for s in spec.scale_ids},
            "channel_mean": list(CHANNEL_MEAN),
            "channel_std": list(CHANNEL_STD),
        },
    )
    manifest_path = out_dir / "manifest.json"
    write_manifest(doc, manifest_path)
    return manifest_path
