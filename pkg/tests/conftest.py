import numpy as np
import pytest

from signkit.dataset import load_dataset
from signkit.distortion import fit_distortion_model
from signkit.images import load_rgba
from signkit.normalize import collect_distortion_stats
from signkit.toydata import make_backgrounds, make_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Toy corpus shared by integration-level tests: dataset + backgrounds."""
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root / "train")
    make_backgrounds(root / "backgrounds", count=50)
    return root


@pytest.fixture(scope="session")
def toy_dataset(toy_root):
    return load_dataset(toy_root / "train" / "dataset.json")


@pytest.fixture(scope="session")
def toy_stats(toy_root, toy_dataset):
    image_dir = toy_root / "train"
    return collect_distortion_stats(toy_dataset, lambda rec: load_rgba(image_dir / rec.uri))


@pytest.fixture(scope="session")
def toy_model(toy_stats):
    return fit_distortion_model(
        toy_stats.angles,
        toy_stats.brightness_by_category,
        toy_stats.rectified_sizes,
        seed=1,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
