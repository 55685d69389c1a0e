import numpy as np
import pytest
import torch

from fedpurify.models import (ModelParams, build_model, flatten_params,
                              load_checkpoint, save_checkpoint, unflatten_params)

from conftest import random_params_like


def test_flatten_roundtrip(tiny_model):
    params = ModelParams.from_model(tiny_model)
    vec = flatten_params(params)
    assert vec.dtype == np.float64
    rebuilt = unflatten_params(vec, params)
    for (n1, t1), (n2, t2) in zip(params.items(), rebuilt.items()):
        assert n1 == n2
        assert torch.allclose(t1, t2)


def test_flatten_order_is_canonical(tiny_model):
    params = ModelParams.from_model(tiny_model)
    names = params.layer_names()
    assert all(n.startswith(("encoder.", "head.")) for n in names)
    # encoder block strictly precedes the head block
    first_head = names.index(next(n for n in names if n.startswith("head.")))
    assert all(n.startswith("head.") for n in names[first_head:])


def test_unflatten_wrong_length(tiny_model):
    params = ModelParams.from_model(tiny_model)
    with pytest.raises(ValueError):
        unflatten_params(np.zeros(3), params)


def test_load_into_roundtrip(tiny_model):
    params = random_params_like(ModelParams.from_model(tiny_model), seed=5)
    params.load_into(tiny_model)
    again = ModelParams.from_model(tiny_model)
    assert params.same_structure(again)
    for (_, a), (_, b) in zip(params.items(), again.items()):
        assert torch.equal(a, b)


def test_validate_finite(tiny_model):
    params = ModelParams.from_model(tiny_model)
    params.validate_finite()
    bad = params.clone()
    key = next(iter(bad.feature_extractor))
    bad.feature_extractor[key][0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        bad.validate_finite()


def test_combine_subtract(tiny_model):
    base = ModelParams.from_model(tiny_model)
    a = random_params_like(base, seed=1)
    b = random_params_like(base, seed=2)
    delta = a.combine(b, lambda x, y: x - y)
    vec = flatten_params(delta)
    assert np.allclose(vec, flatten_params(a) - flatten_params(b), atol=1e-7)


def test_combine_structure_mismatch(tiny_model, small_model):
    a = ModelParams.from_model(tiny_model)
    b = ModelParams.from_model(small_model)
    with pytest.raises(ValueError):
        a.combine(b, lambda x, y: x + y)


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    params = random_params_like(ModelParams.from_model(tiny_model), seed=9)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, params)
    for (_, a), (_, b) in zip(params.items(), loaded.items()):
        assert torch.equal(a, b)


def test_build_model_seeded_init():
    m1 = build_model("small_cnn", num_classes=10, seed=7)
    m2 = build_model("small_cnn", num_classes=10, seed=7)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)
    with pytest.raises(ValueError):
        build_model("nope", num_classes=10)


def test_split_classifier_forward(synthetic_train, small_model):
    x, _ = synthetic_train.subset(np.arange(4)).to_tensors()
    feats = small_model.features(x)
    logits = small_model(x)
    assert feats.shape == (4, small_model.feature_dim)
    assert logits.shape == (4, 10)
