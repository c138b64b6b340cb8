import numpy as np
import pytest

from snseg.core import ClassCatalog, LabelMask, RasterImage
from snseg.synthdata import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def catalog():
    return ClassCatalog()


@pytest.fixture(scope="session")
def phantom64():
    """One deterministic 64x64 phantom (image, mask, od_truth)."""
    return generate_phantom(PhantomSpec(image_size=64, seed=11), 0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, h=8, w=8, n_classes=3) -> LabelMask:
    return LabelMask(rng.integers(0, n_classes, size=(h, w), dtype=np.uint8))


def random_image(rng, h=8, w=8) -> RasterImage:
    return RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
