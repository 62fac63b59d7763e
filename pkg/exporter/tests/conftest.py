"""Shared fixtures: tiny image corpus and session-cached random-init models.

All tests run with random weights; the tapped geometry does not depend on
weight values and the sandbox has no weight downloads.
"""

import numpy as np
import pytest
from PIL import Image

from cfmpexport import build_model


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Four small non-square images, ids following the groups-of-100 scheme."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    for image_id in ("100000", "100001", "100100", "100101"):
        arr = rng.integers(0, 256, size=(96, 128, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / f"{image_id}.png")
    return root


@pytest.fixture(scope="session")
def googlenet_model():
    return build_model("googlenet", "none", seed=0)


@pytest.fixture(scope="session")
def vgg16_model():
    return build_model("vgg16", "none", seed=0)
