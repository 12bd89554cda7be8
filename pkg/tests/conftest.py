import numpy as np
import pytest
import torch

from repiece.data import build_manifest
from repiece.synthetic import generate_corpus

FIXTURES = None  # set lazily; pytest rootdir-relative


def pytest_configure(config):
    global FIXTURES
    FIXTURES = config.rootpath / "tests" / "data"
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def photo():
    """Checked-in textured image, independent of the synthetic generator."""
    from PIL import Image

    return np.asarray(Image.open(FIXTURES / "photo.png").convert("RGB"))


@pytest.fixture(scope="session")
def corpus_n2(tmp_path_factory):
    """50 clean gradient images at n=2 geometry plus their manifest."""
    root = tmp_path_factory.mktemp("corpus_n2")
    generate_corpus(root, count=50, image_px=48, seed=11, noise=0.0)
    return root, build_manifest(root, 0)


@pytest.fixture(scope="session")
def corpus_small(tmp_path_factory):
    """12 images: enough for split mechanics and fast training loops."""
    root = tmp_path_factory.mktemp("corpus_small")
    generate_corpus(root, count=12, image_px=48, seed=7, noise=0.05)
    return root, build_manifest(root, 0)
