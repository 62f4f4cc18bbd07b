import numpy as np
import pytest

from robustcomp.nn import LayerSpec, Model, init_params


def tiny_model(seed=0, channels=(4, 6), hw=28, n_classes=4):
    """Small conv net (convs -> 2x2 pool -> fc) for fast tests."""
    layers = []
    cin = 1
    for c in channels:
        layers.append(LayerSpec("conv", c, cin, 3, 1, 1, activation=True))
        cin = c
    layers.append(LayerSpec("maxpool", kernel=2, stride=2))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("fc", n_classes, channels[-1] * (hw // 2) ** 2,
                            activation=False))
    return Model(layers, init_params(layers, seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
