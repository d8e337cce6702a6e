import pytest
import torch

from graftkit.backbones import build_backbone
from graftkit.config import TrainConfig
from graftkit.losses import LossWeights
from graftkit.paired_data import DatasetSplit, synth_event_pairs, synth_thermal_pairs


def make_images(n, seed=0, size=28):
    """Blank frames with one textured square each, plus random digit labels."""
    generator = torch.Generator().manual_seed(seed)
    images = torch.zeros(n, size, size)
    labels = torch.randint(10, (n,), generator=generator)
    for k in range(n):
        top, left = torch.randint(4, size - 12, (2,), generator=generator).tolist()
        images[k, top:top + 8, left:left + 8] = 0.2 + 0.8 * torch.rand(8, 8, generator=generator)
    return images, labels


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    for name in ("GRAFTKIT_OUT", "GRAFTKIT_DB_URL", "GRAFTKIT_LOG_LEVEL", "GRAFTKIT_DATA_ROOT"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def image_factory():
    return make_images


@pytest.fixture
def lenet():
    torch.manual_seed(0)
    return build_backbone("lenet5").eval()


@pytest.fixture
def identity_split(image_factory):
    """Modality is an exact copy of the intensity frame."""
    train_images, train_labels = image_factory(16, seed=0)
    test_images, test_labels = image_factory(8, seed=1)
    train = synth_thermal_pairs(train_images, noise_sigma=0, blur_radius=0, remap="identity", labels=train_labels)
    test = synth_thermal_pairs(test_images, noise_sigma=0, blur_radius=0, remap="identity", labels=test_labels,
                               start_index=16)
    return DatasetSplit(train, test)


@pytest.fixture
def thermal_split(image_factory):
    train_images, train_labels = image_factory(24, seed=0)
    test_images, test_labels = image_factory(8, seed=1)
    train = synth_thermal_pairs(train_images, seed=0, labels=train_labels)
    test = synth_thermal_pairs(test_images, seed=1, labels=test_labels, start_index=24)
    return DatasetSplit(train, test)


@pytest.fixture
def event_split(image_factory):
    train_images, train_labels = image_factory(24, seed=0)
    test_images, test_labels = image_factory(8, seed=1)
    train, _ = synth_event_pairs(train_images, seed=0, labels=train_labels)
    test, _ = synth_event_pairs(test_images, seed=1, labels=test_labels, start_index=24)
    return DatasetSplit(train, test)


@pytest.fixture
def small_cfg():
    return TrainConfig(
        epochs=1,
        learning_rate=1e-3,
        batch_size=8,
        crop_size=None,
        loss_weights=LossWeights(gamma_h=1e-4, gamma_r=1e-4),
        allow_custom_gamma=True,
    )
