import numpy as np
import pytest

from zooscout.config import Config, EncodingConfig, FamilyConfig, MetaSpaceConfig, RetrievalConfig, SpaceConfig, SupernetConfig
from zooscout.dataio import DatasetDescriptor, gen_family
from zooscout.encoding import FrozenExtractor, build_encodings, make_probe
from zooscout.metaspace import init_metaspace, train_metaspace
from zooscout.pipeline import train_supernets
from zooscout.supernet import SearchSpace
from zooscout.zoo import build_zoo


def tiny_config():
    """A configuration small enough to run the whole pipeline in seconds."""
    return Config(
        space=SpaceConfig(stages=2, depth=[1, 2], width=[0.5, 1.0], expansion=[0.5, 1.0], base_channels=4,
                          input_shape=[1, 8, 8], classes=4),
        supernet=SupernetConfig(epochs=2, batch_size=32),
        encoding=EncodingConfig(n_z=2, n_img=48, feature_dim=8),
        metaspace=MetaSpaceConfig(embed_dim=8, hidden=[16], epochs=20),
        retrieval=RetrievalConfig(topk=4),
        family=FamilyConfig(image_shape=[1, 8, 8], ids=["d0", "d1", "d2"], shifts=[0.0, 0.25, 2.5], samples=80),
    ).validate()


@pytest.fixture(scope="session")
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def space(config):
    return config.space.space()


@pytest.fixture(scope="session")
def datasets(config):
    return gen_family(config.family.spec(), seed=0)


@pytest.fixture(scope="session")
def supernets(config, space, datasets):
    return train_supernets(space, datasets, config.supernet, seed=0)


@pytest.fixture(scope="session")
def zoo(supernets, datasets):
    return build_zoo(supernets, datasets, policy="sample:6", seed=0)


@pytest.fixture(scope="session")
def extractor(space, config):
    return FrozenExtractor(space.input_shape, config.encoding.feature_dim, seed=0)


@pytest.fixture(scope="session")
def encodings(zoo, supernets, datasets, extractor, space, config):
    probe = make_probe(space, config.encoding.n_z, seed=0)
    return build_encodings(zoo, supernets, datasets, extractor, probe, config.encoding.n_img, seed=0)


@pytest.fixture(scope="session")
def trained(zoo, encodings, extractor, config):
    ms = config.metaspace
    model_dim = len(next(iter(encodings.models.values())))
    params = init_metaspace(model_dim, extractor.feature_dim, ms.embed_dim, tuple(ms.hidden), seed=0, **ms.hyper())
    return train_metaspace(zoo, encodings, params, epochs=ms.epochs, seed=0)


@pytest.fixture
def small_space():
    return SearchSpace(stages=2, base_channels=4, input_shape=(1, 8, 8), num_classes=3)


def separable_dataset(n=200, classes=2, shape=(1, 8, 8), seed=0):
    """Dark images for class 0, bright ones for class 1."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    levels = np.where(labels == 0, 60, 190)
    images = levels[:, None, None, None] + rng.normal(0, 12, (n,) + shape)
    return DatasetDescriptor("separable", np.clip(images, 0, 255).astype(np.uint8), labels, classes)
