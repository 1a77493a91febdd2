import numpy as np
import pytest
from PIL import Image, ImageDraw

from fmseg_extract.models import tiny_config, tiny_random_bundle


@pytest.fixture(scope="session")
def bundle():
    return tiny_random_bundle(seed=3)


@pytest.fixture(scope="session")
def config():
    return tiny_config(seed=3)


@pytest.fixture(scope="session")
def tiny_image():
    """64x64 photo stand-in: textured background with one bright object."""
    rng = np.random.default_rng(5)
    arr = (rng.integers(40, 90, size=(64, 64, 3))).astype(np.uint8)
    img = Image.fromarray(arr)
    draw = ImageDraw.Draw(img)
    draw.rectangle([16, 20, 47, 51], fill=(220, 60, 40))
    return img


@pytest.fixture(scope="session")
def tiny_gt():
    gt = np.zeros((64, 64), dtype=np.int32)
    gt[20:52, 16:48] = 1
    return gt
