import numpy as np
import pytest
import torch

from fedpurify.data import make_synthetic10
from fedpurify.models import ModelParams, build_model


@pytest.fixture(scope="session")
def tiny_model():
    return build_model("tiny_cnn", num_classes=2, seed=0)


@pytest.fixture(scope="session")
def small_model():
    return build_model("small_cnn", num_classes=10, seed=0)


@pytest.fixture(scope="session")
def synthetic_train():
    return make_synthetic10(600, seed=11)


@pytest.fixture(scope="session")
def synthetic_test():
    return make_synthetic10(400, seed=12)


def random_params_like(template: ModelParams, seed: int) -> ModelParams:
    """Fresh ModelParams with the template's structure and seeded values."""
    gen = torch.Generator().manual_seed(seed)
    from collections import OrderedDict

    enc = OrderedDict(
        (k, torch.randn(v.shape, generator=gen, dtype=torch.float32))
        for k, v in template.feature_extractor.items()
    )
    head = OrderedDict(
        (k, torch.randn(v.shape, generator=gen, dtype=torch.float32))
        for k, v in template.classifier.items()
    )
    return ModelParams(feature_extractor=enc, classifier=head)
