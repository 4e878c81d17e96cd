import numpy as np
import pytest

from dison import nn
from dison.data import SyntheticConfig, generate
from dison.pretrain import PretrainConfig, pretrain


@pytest.fixture(scope="session")
def small_bench():
    """An 8x8 two-class benchmark with a briefly trained primary model."""
    cfg = SyntheticConfig(patch_size=8, train_per_class=40, n_id_test=10, n_ood_test=20,
                          class_offset=2.0, artifact_size=2, seed=3)
    train, id_test, ood_test = generate(cfg)
    spec = nn.NetworkSpec(64, (16, 8), seed=3)
    params, log = pretrain(PretrainConfig(spec, epochs=15, seed=3), train)
    return {"config": cfg, "train": train, "id_test": id_test, "ood_test": ood_test,
            "spec": spec, "pretrained": params, "log": log}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
