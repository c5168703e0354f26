import numpy as np
import pytest

from carpetbomb.core import Image
from carpetbomb.toy import (
    ToyDataset,
    fresh_toy_net,
    make_toy_dataset,
    toy_handle,
    train_toy_net,
)


@pytest.fixture
def fresh_handle():
    """Untrained toy classifier handle; cheap, good enough for oracle tests."""
    return toy_handle(fresh_toy_net(seed=3))


@pytest.fixture
def fresh_seg_handle():
    return toy_handle(fresh_toy_net(seed=3), task="segmentation")


@pytest.fixture(scope="session")
def tiny_set() -> ToyDataset:
    return make_toy_dataset(24, seed=77)


@pytest.fixture
def rand_image():
    def make(seed=0, h=32, w=32, id=""):
        rng = np.random.default_rng(seed)
        return Image(rng.random((h, w, 3)).astype(np.float32), id=id)

    return make


# ---------------------------------------------------------------------------
# Trained desk-scale model, shared by the direction tests and the
# acceptance suite. Built once per session (about two minutes of CPU).
# ---------------------------------------------------------------------------

TRAIN_SEED = 0
DATASET_SEEDS = {"train": 100, "test": 200, "craft": 300, "proxy": 400}


@pytest.fixture(scope="session")
def toy_train_set() -> ToyDataset:
    return make_toy_dataset(3000, seed=DATASET_SEEDS["train"])


@pytest.fixture(scope="session")
def toy_test_set() -> ToyDataset:
    return make_toy_dataset(1000, seed=DATASET_SEEDS["test"])


@pytest.fixture(scope="session")
def toy_craft_set() -> ToyDataset:
    return make_toy_dataset(2000, seed=DATASET_SEEDS["craft"])


@pytest.fixture(scope="session")
def toy_proxy_set() -> ToyDataset:
    return make_toy_dataset(2000, seed=DATASET_SEEDS["proxy"], shifted=True)


@pytest.fixture(scope="session")
def trained_net(toy_train_set):
    return train_toy_net(toy_train_set, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def trained_handle(trained_net):
    return toy_handle(trained_net)


@pytest.fixture(scope="session")
def trained_seg_handle(trained_net):
    return toy_handle(trained_net, task="segmentation")
