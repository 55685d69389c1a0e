"""Aggregation oracles: the weighted mean is checked against an independent
flat-vector reference computed in float64."""

import numpy as np
import pytest
import torch

from fedpurify.federation import ClientUpdate, aggregate
from fedpurify.models import ModelParams, build_model, flatten_params

from conftest import random_params_like


def _scalar_params(value: float) -> ModelParams:
    from collections import OrderedDict

    return ModelParams(
        feature_extractor=OrderedDict(w=torch.tensor([float(value)])),
        classifier=OrderedDict(b=torch.tensor([float(value)])),
    )


def test_two_clients_equal_counts():
    out = aggregate([
        ClientUpdate(0, _scalar_params(0.0), 10),
        ClientUpdate(1, _scalar_params(2.0), 10),
    ])
    assert float(out.feature_extractor["w"]) == pytest.approx(1.0)
    assert float(out.classifier["b"]) == pytest.approx(1.0)


def test_two_clients_weighted():
    # counts (1, 3), params (0, 4) -> 0.25*0 + 0.75*4 = 3
    out = aggregate([
        ClientUpdate(0, _scalar_params(0.0), 1),
        ClientUpdate(1, _scalar_params(4.0), 3),
    ])
    assert float(out.feature_extractor["w"]) == pytest.approx(3.0)


def test_matches_bruteforce_weighted_mean_oracle(tiny_model):
    template = ModelParams.from_model(tiny_model)
    rng = np.random.default_rng(0)
    counts = rng.integers(1, 50, size=5).tolist()
    updates = [ClientUpdate(i, random_params_like(template, seed=100 + i), counts[i])
               for i in range(5)]

    out = aggregate(updates)

    # independent reference on flat float64 vectors
    mats = np.stack([flatten_params(u.params) for u in updates])
    weights = np.asarray(counts, dtype=np.float64) / sum(counts)
    reference = weights @ mats
    assert np.max(np.abs(flatten_params(out) - reference)) <= 1e-6


def test_permutation_invariance_is_exact(tiny_model):
    template = ModelParams.from_model(tiny_model)
    updates = [ClientUpdate(i, random_params_like(template, seed=i), 7 + i)
               for i in range(6)]
    a = aggregate(updates)
    b = aggregate(list(reversed(updates)))
    for (_, x), (_, y) in zip(a.items(), b.items()):
        assert torch.equal(x, y)


def test_single_client_identity(tiny_model):
    template = ModelParams.from_model(tiny_model)
    params = random_params_like(template, seed=3)
    out = aggregate([ClientUpdate(4, params, 13)])
    for (_, x), (_, y) in zip(out.items(), params.items()):
        assert torch.allclose(x, y, atol=1e-7)


def test_selected_subset():
    out = aggregate(
        [ClientUpdate(0, _scalar_params(0.0), 1),
         ClientUpdate(1, _scalar_params(4.0), 1),
         ClientUpdate(2, _scalar_params(100.0), 1)],
        selected=[0, 1],
    )
    assert float(out.feature_extractor["w"]) == pytest.approx(2.0)


def test_selected_missing_update_errors():
    updates = [ClientUpdate(0, _scalar_params(1.0), 1)]
    with pytest.raises(KeyError):
        aggregate(updates, selected=[0, 9])


def test_empty_inputs_error():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([ClientUpdate(0, _scalar_params(1.0), 1)], selected=[])


def test_duplicate_ids_error():
    with pytest.raises(ValueError):
        aggregate([ClientUpdate(0, _scalar_params(1.0), 1),
                   ClientUpdate(0, _scalar_params(2.0), 1)])


def test_incompatible_structure_error(tiny_model):
    template = ModelParams.from_model(tiny_model)
    with pytest.raises(ValueError):
        aggregate([ClientUpdate(0, random_params_like(template, seed=0), 1),
                   ClientUpdate(1, _scalar_params(1.0), 1)])


def test_int_buffers_are_rounded():
    from collections import OrderedDict

    def with_buffer(v, n):
        return ModelParams(
            feature_extractor=OrderedDict(w=torch.tensor([v]),
                                          steps=torch.tensor([n], dtype=torch.int64)),
            classifier=OrderedDict(b=torch.tensor([v])),
        )

    out = aggregate([ClientUpdate(0, with_buffer(0.0, 10), 1),
                     ClientUpdate(1, with_buffer(1.0, 11), 1)])
    assert out.feature_extractor["steps"].dtype == torch.int64
    assert int(out.feature_extractor["steps"]) == 10  # round-half-even of 10.5
