"""Layer catalogs: where to tap each network and what must come out.

Each catalog row pins a public layer name to the torchvision module that
emits it and to the feature-map geometry at the base 224 pixel input.  Both
networks are fully convolutional up to every tapped module, so doubling the
input side doubles the grid side exactly; the export path refuses to write
any activation whose shape disagrees with the catalog.

GoogLeNet notes: the torchvision port has no local response normalization,
so ``pool1-norm1`` taps the first max-pool output and ``conv2-norm2`` the
second (the post-pool grid, 28x28x192).  The familiar 16-layer OxfordNet
configuration has two convolutions in its second block, hence conv2_1 and
conv2_2 only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

BASE_SIDE = 224

SCALE_SIDES = {1: BASE_SIDE, 2: 2 * BASE_SIDE}

# torchvision ImageNet preprocessing convention, recorded in every manifest.
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LayerTap:
    """One exportable layer: public name, source module, base geometry."""

    name: str
    module: str
    side: int
    depth: int


GOOGLENET_TAPS = (
    LayerTap("pool1-norm1", "maxpool1", 56, 64),
    LayerTap("conv2-norm2", "maxpool2", 28, 192),
    LayerTap("inception-3a", "inception3a", 28, 256),
    LayerTap("inception-3b", "inception3b", 28, 480),
    LayerTap("inception-4a", "inception4a", 14, 512),
    LayerTap("inception-4b", "inception4b", 14, 512),
    LayerTap("inception-4c", "inception4c", 14, 512),
    LayerTap("inception-4d", "inception4d", 14, 528),
    LayerTap("inception-4e", "inception4e", 14, 832),
    LayerTap("inception-5a", "inception5a", 7, 832),
    LayerTap("inception-5b", "inception5b", 7, 1024),
)

VGG16_TAPS = (
    LayerTap("conv2_1", "features.6", 112, 128),
    LayerTap("conv2_2", "features.8", 112, 128),
    LayerTap("conv3_1", "features.11", 56, 256),
    LayerTap("conv3_2", "features.13", 56, 256),
    LayerTap("conv3_3", "features.15", 56, 256),
    LayerTap("conv4_1", "features.18", 28, 512),
    LayerTap("conv4_2", "features.20", 28, 512),
    LayerTap("conv4_3", "features.22", 28, 512),
    LayerTap("conv5_1", "features.25", 14, 512),
    LayerTap("conv5_2", "features.27", 14, 512),
    LayerTap("conv5_3", "features.29", 14, 512),
)

MODEL_TAPS: dict[str, tuple[LayerTap, ...]] = {
    "googlenet": GOOGLENET_TAPS,
    "vgg16": VGG16_TAPS,
}

WEIGHT_CHOICES = ("pretrained", "none")


def catalog(model_name: str) -> tuple[LayerTap, ...]:
    try:
        return MODEL_TAPS[model_name]
    except KeyError:
        raise KeyError(
            f"unknown model {model_name!r}, available: {', '.join(sorted(MODEL_TAPS))}"
        ) from None


def resolve_taps(model_name: str, layer_names: tuple[str, ...]) -> tuple[LayerTap, ...]:
    """Catalog rows for the requested layers; empty selection means all."""
    rows = catalog(model_name)
    if not layer_names:
        return rows
    by_name = {tap.name: tap for tap in rows}
    missing = [name for name in layer_names if name not in by_name]
    if missing:
        raise KeyError(
            f"unknown {model_name} layer(s) {', '.join(missing)}; "
            f"available: {', '.join(tap.name for tap in rows)}"
        )
    return tuple(by_name[name] for name in layer_names)


def expected_side(tap: LayerTap, scale_id: int) -> int:
    # fully convolutional up to the tap: grid side scales with input side
    return tap.side * (SCALE_SIDES[scale_id] // BASE_SIDE)


def build_model(model_name: str, weights: str, seed: int = 0) -> torch.nn.Module:
    """Construct the network in inference mode.

    ``weights="pretrained"`` loads the torchvision ImageNet weights (needs
    the weight file to be downloadable or cached); ``"none"`` initializes
    randomly from ``seed`` so shape-level work stays reproducible offline.
    """
    from torchvision import models

    catalog(model_name)
    if weights not in WEIGHT_CHOICES:
        raise ValueError(f"weights must be one of {WEIGHT_CHOICES}, got {weights!r}")
    pretrained = weights == "pretrained"
    if not pretrained:
        torch.manual_seed(seed)
    if model_name == "googlenet":
        if pretrained:
            model = models.googlenet(weights=models.GoogLeNet_Weights.IMAGENET1K_V1)
        else:
            model = models.googlenet(weights=None, aux_logits=False, init_weights=True)
    else:
        model = models.vgg16(
            weights=models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
        )
    model.eval()
    model.requires_grad_(False)
    return model
