"""Convolutional feature map exporter for the .cfmp retrieval pipeline.

Runs torchvision's GoogLeNet or VGG16 over an image set at one or two input
scales and writes the activations of cataloged layers as ``.cfmp`` files,
the warped inputs as ``.ppm``, and a ``manifest.json`` the retrieval engine
loads directly.
"""

from .catalog import (
    BASE_SIDE,
    GOOGLENET_TAPS,
    MODEL_TAPS,
    SCALE_SIDES,
    VGG16_TAPS,
    LayerTap,
    build_model,
    catalog,
    expected_side,
    resolve_taps,
)
from .export import ExportSpec, export, load_warped
from .formats import cfmp_bytes, manifest_doc, write_cfmp, write_manifest, write_ppm

__version__ = "0.1.0"

__all__ = [
    "BASE_SIDE",
    "ExportSpec",
    "GOOGLENET_TAPS",
    "LayerTap",
    "MODEL_TAPS",
    "SCALE_SIDES",
    "VGG16_TAPS",
    "build_model",
    "catalog",
    "cfmp_bytes",
    "expected_side",
    "export",
    "load_warped",
    "manifest_doc",
    "resolve_taps",
    "write_cfmp",
    "write_manifest",
    "write_ppm",
]
