import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import fedpurify.purification as purification
from fedpurify.attacks import default_trigger, poison_client_data
from fedpurify.federation import local_train
from fedpurify.metrics import attack_success_rate, main_accuracy
from fedpurify.models import ModelParams, build_model
from fedpurify.purification import (PrototypeSet, PurifyConfig,
                                    class_mean_prototypes, distill,
                                    extractor_prototypes, kt_loss, l2_normalize,
                                    pcl_total, proto_loss_1, proto_loss_2, purify,
                                    rectify, teacher_prototypes)
from fedpurify.serverdata import ServerDataset
from fedpurify.teachers import StubTeacher


class TestL2Normalize:

    def test_unit_output(self):
        x = torch.randn(5, 7, generator=torch.Generator().manual_seed(0))
        out = l2_normalize(x)
        assert torch.allclose(out.norm(dim=-1), torch.ones(5), atol=1e-6)

    def test_normalize_twice_is_noop(self):
        x = torch.randn(5, 7, generator=torch.Generator().manual_seed(1))
        once = l2_normalize(x)
        assert torch.allclose(l2_normalize(once), once, atol=1e-7)

    def test_zero_vector_error(self):
        x = torch.ones(3, 4)
        x[1] = 0
        with pytest.raises(ValueError, match="zero vector"):
            l2_normalize(x)


class TestPrototypeSet:

    def test_valid_sources_only(self):
        with pytest.raises(ValueError, match="source"):
            PrototypeSet(source="oracle", vectors=torch.eye(3))

    def test_unit_norm_enforced(self):
        with pytest.raises(ValueError, match="unit norm"):
            PrototypeSet(source="extractor", vectors=2 * torch.eye(3))

    def test_shape_enforced(self):
        with pytest.raises(ValueError):
            PrototypeSet(source="extractor", vectors=torch.ones(4))

    def test_num_classes(self):
        assert PrototypeSet(source="teacher-text", vectors=torch.eye(4)).num_classes == 4


class TestClassMeanPrototypes:

    def test_brute_force_oracle(self):
        g = torch.Generator().manual_seed(2)
        feats = torch.randn(30, 6, generator=g)
        labels = torch.arange(30) % 3
        ps = class_mean_prototypes(feats, labels, 3, source="extractor")
        for c in range(3):
            rows = [feats[i] / feats[i].norm() for i in range(30) if labels[i] == c]
            mean = torch.stack(rows).mean(dim=0)
            want = mean / mean.norm()
            assert torch.allclose(ps.vectors[c], want, atol=1e-6)

    def test_missing_class_error(self):
        with pytest.raises(ValueError, match="class 1"):
            class_mean_prototypes(torch.randn(4, 5), torch.zeros(4).long(), 3,
                                  source="extractor")


def _identity_protos(source, n=2):
    return PrototypeSet(source=source, vectors=torch.eye(n))


class TestFormulaFixtures:
    """Hand-computed values for the two contrastive losses in the C=2,
    unit-similarity configuration: the feature coincides with its positive
    prototype, the sole negative is orthogonal, tau = 1."""

    def setup_method(self):
        self.v = torch.tensor([[1.0, 0.0]])
        self.labels = torch.tensor([0])

    def test_loss_1_equals_minus_one(self):
        loss = proto_loss_1(self.v, self.labels,
                            _identity_protos("extractor"),
                            _identity_protos("teacher-image"), tau=1.0)
        assert float(loss) == pytest.approx(-1.0, abs=1e-6)

    def test_loss_2_equals_minus_one(self):
        loss = proto_loss_2(self.v, self.labels,
                            _identity_protos("teacher-text"), tau=1.0)
        assert float(loss) == pytest.approx(-1.0, abs=1e-6)

    def test_pcl_total_is_sum(self):
        total = pcl_total(self.v, self.labels, _identity_protos("extractor"),
                          _identity_protos("teacher-image"),
                          _identity_protos("teacher-text"), tau=1.0)
        assert float(total) == pytest.approx(-2.0, abs=1e-6)

    def test_positive_in_denominator_variant(self):
        # denominator gains exp(pos/tau): loss = -1 + log(1 + e)
        loss = proto_loss_2(self.v, self.labels,
                            _identity_protos("teacher-text"), tau=1.0,
                            include_positive_in_denominator=True)
        assert float(loss) == pytest.approx(math.log(1 + math.e) - 1.0, abs=1e-6)

    def test_positive_in_denominator_nonnegative(self):
        # conventional form is bounded below by zero
        g = torch.Generator().manual_seed(3)
        for _ in range(10):
            v = l2_normalize(torch.randn(6, 4, generator=g))
            labels = torch.randint(0, 4, (6,), generator=g)
            protos = PrototypeSet(source="teacher-text",
                                  vectors=l2_normalize(torch.randn(4, 4, generator=g)))
            loss = proto_loss_2(v, labels, protos, tau=0.5,
                                include_positive_in_denominator=True)
            assert float(loss) >= -1e-6

    def test_batch_sum_not_mean(self):
        v = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        labels = torch.zeros(3, dtype=torch.long)
        loss = proto_loss_2(v, labels, _identity_protos("teacher-text"), tau=1.0)
        assert float(loss) == pytest.approx(-3.0, abs=1e-6)

    def test_loss_decreases_as_feature_aligns(self):
        protos = _identity_protos("teacher-text")
        losses = []
        for alpha in (0.8, 0.5, 0.2, 0.0):
            v = l2_normalize(torch.tensor([[1.0, alpha]]))
            losses.append(float(proto_loss_2(v, torch.tensor([0]), protos, tau=0.5)))
        assert losses == sorted(losses, reverse=True)

    def test_invalid_inputs(self):
        protos = _identity_protos("teacher-text")
        with pytest.raises(ValueError, match="tau"):
            proto_loss_2(self.v, self.labels, protos, tau=0.0)
        with pytest.raises(ValueError, match="zero feature"):
            proto_loss_2(torch.zeros(1, 2), self.labels, protos, tau=1.0)
        single = PrototypeSet(source="teacher-text", vectors=torch.eye(2)[:1])
        with pytest.raises(ValueError, match="two classes"):
            proto_loss_2(self.v, torch.tensor([0]), single, tau=1.0)


def _float64_protos(source, n_classes, dim, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.randn(n_classes, dim, generator=g, dtype=torch.float64)
    m = m / m.norm(dim=1, keepdim=True)
    ps = PrototypeSet(source=source, vectors=m)
    ps.vectors = m  # keep float64 for finite-difference precision
    return ps


def _central_fd(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        f_plus = float(fn(x))
        flat[i] = orig - h
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def _check_gradient(fn, x0):
    x = x0.clone().requires_grad_(True)
    analytic = torch.autograd.grad(fn(x), x)[0]
    numeric = _central_fd(fn, x0.clone())
    rel = (analytic - numeric).norm() / analytic.norm()
    assert float(rel) <= 1e-4, f"gradient mismatch: rel err {float(rel):.2e}"


class TestGradients:
    """Central finite differences in float64 against autograd."""

    @pytest.mark.parametrize("seed", range(4))
    def test_proto_loss_1_gradient(self, seed):
        g = torch.Generator().manual_seed(100 + seed)
        feats = torch.randn(5, 6, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 3, (5,), generator=g)
        ext = _float64_protos("extractor", 3, 6, 200 + seed)
        img = _float64_protos("teacher-image", 3, 6, 300 + seed)
        _check_gradient(lambda v: proto_loss_1(v, labels, ext, img, tau=0.07), feats)

    @pytest.mark.parametrize("seed", range(3))
    def test_proto_loss_2_gradient(self, seed):
        g = torch.Generator().manual_seed(400 + seed)
        feats = torch.randn(4, 5, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 3, (4,), generator=g)
        txt = _float64_protos("teacher-text", 3, 5, 500 + seed)
        _check_gradient(lambda v: proto_loss_2(v, labels, txt, tau=0.07), feats)

    @pytest.mark.parametrize("seed", range(3))
    def test_kt_loss_gradient(self, seed):
        g = torch.Generator().manual_seed(600 + seed)
        student = torch.randn(6, 4, generator=g, dtype=torch.float64)
        teacher = torch.randn(6, 4, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 4, (6,), generator=g)
        _check_gradient(lambda s: kt_loss(labels, s, teacher, beta=1.0), student)

    def test_positive_denominator_gradient(self):
        g = torch.Generator().manual_seed(700)
        feats = torch.randn(4, 5, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 3, (4,), generator=g)
        txt = _float64_protos("teacher-text", 3, 5, 701)
        _check_gradient(
            lambda v: proto_loss_2(v, labels, txt, tau=0.07,
                                   include_positive_in_denominator=True), feats)


class TestKtLoss:

    def test_equal_logits_reduce_to_cross_entropy(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(8, 5, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 5, (8,), generator=g)
        ce = F.cross_entropy(logits, labels)
        assert float(kt_loss(labels, logits, logits.clone(), beta=1.0)) == \
            pytest.approx(float(ce), abs=1e-8)

    def test_kl_term_nonnegative(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            s = torch.randn(6, 4, generator=g, dtype=torch.float64)
            t = torch.randn(6, 4, generator=g, dtype=torch.float64)
            labels = torch.randint(0, 4, (6,), generator=g)
            ce = float(F.cross_entropy(s, labels))
            assert float(kt_loss(labels, s, t, beta=1.0)) >= ce - 1e-10

    def test_kl_brute_force_four_classes(self):
        g = torch.Generator().manual_seed(2)
        s = torch.randn(5, 4, generator=g, dtype=torch.float64)
        t = torch.randn(5, 4, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 4, (5,), generator=g)
        p = torch.softmax(t, dim=1)
        q = torch.softmax(s, dim=1)
        kl = float((p * (p.log() - q.log())).sum() / 5)
        ce = float(F.cross_entropy(s, labels))
        beta = 0.7
        assert float(kt_loss(labels, s, t, beta=beta)) == \
            pytest.approx(ce + beta * kl, abs=1e-8)

    def test_beta_zero_is_plain_ce_and_ignores_teacher(self):
        g = torch.Generator().manual_seed(3)
        s = torch.randn(4, 3, generator=g)
        labels = torch.randint(0, 3, (4,), generator=g)
        bad_teacher = torch.full((4, 3), float("nan"))
        out = kt_loss(labels, s, bad_teacher, beta=0.0)
        assert float(out) == pytest.approx(float(F.cross_entropy(s, labels)), abs=1e-6)

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            kt_loss(torch.zeros(2).long(), torch.randn(2, 3), torch.randn(2, 3), -0.5)


class TestExtractorPrototypes:

    def test_batching_irrelevant_and_detached(self):
        g = torch.Generator().manual_seed(4)
        images = torch.randn(20, 6, generator=g)
        labels = torch.arange(20) % 4
        weight = torch.randn(6, 6, generator=g, requires_grad=True)

        def embed(batch):
            return batch @ weight

        small = extractor_prototypes(embed, images, labels, 4, batch_size=3)
        big = extractor_prototypes(embed, images, labels, 4, batch_size=50)
        assert torch.allclose(small.vectors, big.vectors, atol=1e-6)
        assert not small.vectors.requires_grad


class TestTeacherPrototypes:

    def test_stub_text_prototypes_are_anchors(self):
        names = ["cat", "dog", "frog"]
        teacher = StubTeacher(names, embed_dim=8, seed=0)
        x = torch.rand(9, 3, 16, 16)
        y = torch.arange(9) % 3
        teacher.calibrate(x, y)
        img_ps, txt_ps = teacher_prototypes(teacher, x, y, names)
        assert txt_ps.source == "teacher-text"
        assert torch.allclose(txt_ps.vectors, teacher.anchors, atol=1e-5)
        assert img_ps.source == "teacher-image"
        assert img_ps.vectors.shape == (3, 8)


class TestPurifyConfig:

    def test_defaults(self):
        cfg = PurifyConfig()
        assert cfg.tau == 0.07 and cfg.beta == 1.0

    @pytest.mark.parametrize("kwargs", [
        {"tau": 0.0}, {"beta": -1.0}, {"pcl_epochs": -1}, {"kt_epochs": -2},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            PurifyConfig(**kwargs)


def _toy_data(n_per_class, seed, size=16):
    """Two trivially separable color classes with light noise."""
    rng = np.random.default_rng(seed)
    x = torch.zeros(2 * n_per_class, 3, size, size)
    y = torch.zeros(2 * n_per_class, dtype=torch.long)
    x[:n_per_class, 0] = 0.9
    x[n_per_class:, 2] = 0.9
    y[n_per_class:] = 1
    x += torch.from_numpy(rng.normal(0, 0.05, x.shape)).float()
    return x.clamp(0, 1), y


def _backdoored_toy(seed=0):
    """Train a small model on 30% poisoned toy data: high MA, high ASR."""
    x, y = _toy_data(150, seed)
    spec = default_trigger((3, 16, 16), size=(3, 3), target_label=0,
                           poison_ratio=0.3)
    px, py, _ = poison_client_data(x, y, spec, seed=seed)
    model = build_model("tiny_cnn", num_classes=2, seed=seed)
    params = ModelParams.from_model(model)
    params, _ = local_train(params, model, px, py, epochs=12, lr=0.05,
                            batch_size=32, seed=seed)
    return model, params, spec


@pytest.fixture(scope="module")
def toy_server():
    images, labels = _toy_data(32, seed=99)
    names = ["red", "blue"]
    teacher = StubTeacher(names, embed_dim=16, seed=0).calibrate(images, labels)
    return images, labels, names, teacher


class TestRectify:

    def test_classifier_bit_identical(self, toy_server):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=1)
        params = ModelParams.from_model(model)
        before = params.clone()
        out, info = rectify(params, model, images, labels, names, teacher,
                            PurifyConfig(pcl_epochs=2, seed=0))
        for key, tensor in before.classifier.items():
            assert torch.equal(out.classifier[key], tensor)
        assert info["flags"] == []
        # the extractor, in contrast, must have moved
        changed = any(not torch.equal(out.feature_extractor[k],
                                      before.feature_extractor[k])
                      for k in before.feature_extractor)
        assert changed

    def test_loss_recorded_per_epoch_and_decreasing(self, toy_server):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=1)
        params = ModelParams.from_model(model)
        _, info = rectify(params, model, images, labels, names, teacher,
                          PurifyConfig(pcl_epochs=4, seed=0))
        assert len(info["pcl_losses"]) == 4
        assert info["pcl_losses"][-1] < info["pcl_losses"][0]

    def test_zero_epochs_is_noop(self, toy_server):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=1)
        params = ModelParams.from_model(model)
        out, info = rectify(params, model, images, labels, names, teacher,
                            PurifyConfig(pcl_epochs=0))
        assert out is params and info["pcl_losses"] == []

    def test_deterministic(self, toy_server):
        images, labels, names, teacher = toy_server
        outs = []
        for _ in range(2):
            model = build_model("tiny_cnn", num_classes=2, seed=1)
            params = ModelParams.from_model(model)
            out, _ = rectify(params, model, images, labels, names, teacher,
                             PurifyConfig(pcl_epochs=2, seed=7))
            outs.append(out)
        for k in outs[0].feature_extractor:
            assert torch.equal(outs[0].feature_extractor[k],
                               outs[1].feature_extractor[k])

    def test_nonfinite_aborts_with_original_params(self, toy_server, monkeypatch):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=1)
        params = ModelParams.from_model(model)
        monkeypatch.setattr(purification, "pcl_total",
                            lambda *a, **k: torch.tensor(float("nan")))
        out, info = rectify(params, model, images, labels, names, teacher,
                            PurifyConfig(pcl_epochs=2))
        assert "purify_aborted_nonfinite" in info["flags"]
        assert out is params


class TestDistill:

    def test_training_loss_decreases(self, toy_server):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=2)
        params = ModelParams.from_model(model)
        _, info = distill(params, model, images, labels, names, teacher,
                          PurifyConfig(kt_epochs=5, seed=0))
        assert len(info["kt_losses"]) == 5
        assert info["kt_losses"][-1] < info["kt_losses"][0]

    def test_zero_epochs_is_noop(self, toy_server):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=2)
        params = ModelParams.from_model(model)
        out, info = distill(params, model, images, labels, names, teacher,
                            PurifyConfig(kt_epochs=0))
        assert out is params and info["kt_losses"] == []

    def test_nonfinite_aborts(self, toy_server, monkeypatch):
        images, labels, names, teacher = toy_server
        model = build_model("tiny_cnn", num_classes=2, seed=2)
        params = ModelParams.from_model(model)
        monkeypatch.setattr(purification, "kt_loss",
                            lambda *a, **k: torch.tensor(float("inf")))
        out, info = distill(params, model, images, labels, names, teacher,
                            PurifyConfig(kt_epochs=2))
        assert "purify_aborted_nonfinite" in info["flags"]
        assert out is params


def _as_server_dataset(images, labels, names):
    return ServerDataset(
        images=images.numpy(),
        labels=labels.numpy(),
        captions=[f"a photo of a {names[int(c)]}" for c in labels],
        provenance=["test"] * len(labels),
        manifest={"format_version": 1, "classes": list(names),
                  "num_classes": len(names)},
    )


class TestPurify:

    def test_manifest_without_classes_rejected(self, toy_server):
        images, labels, names, teacher = toy_server
        ds = _as_server_dataset(images, labels, names)
        ds.manifest.pop("classes")
        model = build_model("tiny_cnn", num_classes=2, seed=3)
        with pytest.raises(ValueError, match="class names"):
            purify(ModelParams.from_model(model), model, ds, teacher, PurifyConfig())

    def test_stage_toggles(self, toy_server):
        images, labels, names, teacher = toy_server
        ds = _as_server_dataset(images, labels, names)
        model = build_model("tiny_cnn", num_classes=2, seed=3)
        params = ModelParams.from_model(model)
        cfg = PurifyConfig(pcl_epochs=1, kt_epochs=1, seed=0)
        _, info = purify(params, model, ds, teacher, cfg, enable_fr=False)
        assert info["pcl_losses"] == [] and len(info["kt_losses"]) == 1
        _, info = purify(params, model, ds, teacher, cfg, enable_kd=False)
        assert len(info["pcl_losses"]) == 1 and info["kt_losses"] == []

    def test_fr_abort_skips_kd(self, toy_server, monkeypatch):
        images, labels, names, teacher = toy_server
        ds = _as_server_dataset(images, labels, names)
        model = build_model("tiny_cnn", num_classes=2, seed=3)
        params = ModelParams.from_model(model)
        monkeypatch.setattr(purification, "pcl_total",
                            lambda *a, **k: torch.tensor(float("nan")))
        out, info = purify(params, model, ds, teacher,
                           PurifyConfig(pcl_epochs=1, kt_epochs=3, seed=0))
        assert info["flags"] == ["purify_aborted_nonfinite"]
        assert info["kt_losses"] == []
        assert out is params


def test_purification_removes_backdoor(toy_server):
    """End-to-end sanity: a backdoored model goes through both stages and
    comes out with the trigger neutralized at negligible accuracy cost."""
    model, params, spec = _backdoored_toy(seed=0)
    x_test, y_test = _toy_data(100, seed=1)

    params.load_into(model)
    ma_before = main_accuracy(model, x_test, y_test)
    asr_before = attack_success_rate(model, x_test, y_test, spec)
    assert ma_before >= 0.95
    assert asr_before >= 0.90

    images, labels, names, teacher = toy_server
    ds = _as_server_dataset(images, labels, names)
    cfg = PurifyConfig(tau=0.07, beta=1.0, pcl_epochs=3, kt_epochs=8,
                       lr=3e-2, batch_size=32, seed=0)
    cleaned, info = purify(params, model, ds, teacher, cfg)
    assert info["flags"] == []

    cleaned.load_into(model)
    ma_after = main_accuracy(model, x_test, y_test)
    asr_after = attack_success_rate(model, x_test, y_test, spec)
    assert asr_after <= 0.20
    assert ma_after >= ma_before - 0.05
