import math

import numpy as np
import pytest

from errors import ArtifactError, ConfigError, DataError, DomainError
from numgrad import ParameterSet, Tensor, finite_diff_check
from reclosses import (
    LossKind,
    MarginHead,
    RecognitionConfig,
    arcface_loss,
    cosface_loss,
    load_run,
    save_run,
    softmax_loss,
    train_recognizer,
)
from synthface import DomainDataset, GenerationConfig, build_dataset


def two_class_head(kind, columns, **kwargs):
    head = MarginHead(kind, 2, embedding_dim=2, **kwargs)
    head.params["W"].data = np.array(columns, dtype=np.float64).T
    return head


@pytest.fixture
def rng():
    return np.random.default_rng(21)


@pytest.fixture
def batch(rng):
    return Tensor(rng.normal(0, 1, (6, 5))), rng.integers(0, 4, 6)


@pytest.fixture(scope="module")
def faces():
    return build_dataset(GenerationConfig.balanced(3, 4, seed=2))


@pytest.fixture
def small_cfg():
    return RecognitionConfig(epochs=10, batch=16, embedding_dim=8, hidden=16, seed=4)


class TestLossKind:
    """Parsing loss names"""

    def test_parse(self):
        assert LossKind.parse(" ArcFace ") == LossKind.ARCFACE

    def test_unknown(self):
        with pytest.raises(ConfigError) as e:
            LossKind.parse("triplet")
        assert e.value.exit_code == 1


class TestSoftmaxLoss:
    """Plain softmax cross-entropy"""

    def test_single_class(self, rng):
        head = MarginHead("softmax", 1, embedding_dim=3)
        z = Tensor(rng.normal(0, 1, (4, 3)))
        assert softmax_loss(head, z, [0, 0, 0, 0]).item() == 0.0

    def test_equal_logits(self, rng):
        head = MarginHead("softmax", 4, embedding_dim=3)
        head.params["W"].data[:] = 0.0
        loss = softmax_loss(head, Tensor(rng.normal(0, 1, (5, 3))), [0, 1, 2, 3, 0])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_two_class_value(self):
        head = two_class_head("softmax", [(2.0, 0.0), (0.0, 0.0)])
        loss = softmax_loss(head, Tensor([[1.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(math.log1p(math.exp(-2.0)), rel=1e-12)
        assert loss.item() == pytest.approx(0.1269, abs=1e-4)

    def test_wrong_head(self):
        head = MarginHead("cosface", 2, embedding_dim=2)
        with pytest.raises(DomainError):
            softmax_loss(head, Tensor([[1.0, 0.0]]), [0])


class TestMarginLosses:
    """Additive cosine and angular margins"""

    def test_cosface_value(self):
        head = two_class_head("cosface", [(1.0, 0.0), (0.0, 1.0)])
        loss = cosface_loss(head, Tensor([[1.0, 0.0]]), [0], m=0.35, s=16.0)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-10.4)), rel=1e-9)

    def test_arcface_value_at_zero_angle(self):
        head = two_class_head("arcface", [(1.0, 0.0), (0.0, 1.0)])
        loss = arcface_loss(head, Tensor([[1.0, 0.0]]), [0], m=0.3, s=16.0)
        expected = math.log1p(math.exp(-16 * math.cos(0.3)))
        assert loss.item() == pytest.approx(expected, rel=1e-2)
        assert loss.item() == pytest.approx(2.3e-7, rel=0.05)

    def test_single_class(self, rng):
        z = Tensor(rng.normal(0, 1, (3, 4)))
        for kind, fn in (("cosface", cosface_loss), ("arcface", arcface_loss)):
            head = MarginHead(kind, 1, embedding_dim=4)
            assert fn(head, z, [0, 0, 0]).item() == 0.0

    def test_zero_margin_reductions_agree(self, batch):
        z, y = batch
        cos_head = MarginHead("cosface", 4, embedding_dim=5, seed=3)
        arc_head = MarginHead("arcface", 4, embedding_dim=5, seed=3)
        cos = cosface_loss(cos_head, z, y, m=0.0).item()
        arc = arcface_loss(arc_head, z, y, m=0.0).item()
        assert cos == pytest.approx(arc, abs=1e-10)

    def test_larger_margin_larger_loss(self, batch):
        z, y = batch
        head = MarginHead("cosface", 4, embedding_dim=5, seed=3)
        small, large = cosface_loss(head, z, y, m=0.1), cosface_loss(head, z, y, m=0.35)
        assert small.item() < large.item()
        arc = MarginHead("arcface", 4, embedding_dim=5, seed=3)
        small, large = arcface_loss(arc, z, y, m=0.1), arcface_loss(arc, z, y, m=0.3)
        assert small.item() < large.item()

    def test_embedding_scale_invariance(self, batch):
        z, y = batch
        for kind in ("cosface", "arcface"):
            head = MarginHead(kind, 4, embedding_dim=5, seed=1)
            expected = head.loss(z, y).item()
            assert head.loss(z * 7.5, y).item() == pytest.approx(expected, abs=1e-12)

    def test_class_permutation_equivariance(self, batch):
        z, y = batch
        perm = np.array([2, 0, 3, 1])
        for kind in ("softmax", "cosface", "arcface"):
            head = MarginHead(kind, 4, embedding_dim=5, seed=6)
            permuted = MarginHead(kind, 4, embedding_dim=5, seed=6)
            permuted.params["W"].data = head.W.data[:, perm]
            new_label = np.argsort(perm)[y]
            expected = head.loss(z, y).item()
            actual = permuted.loss(z, new_label).item()
            assert actual == pytest.approx(expected, abs=1e-12)

    def test_arcface_near_pi_is_finite(self):
        theta = math.pi - 0.05
        head = two_class_head("arcface", [(1.0, 0.0), (0.0, 1.0)])
        zs = ParameterSet()
        z = zs.add("z", [[math.cos(theta), math.sin(theta)]])
        loss = arcface_loss(head, z, [0])
        assert np.isfinite(loss.item())
        params = ParameterSet.combine({"z": zs, "head": head.params})
        assert finite_diff_check(lambda: arcface_loss(head, z, [0]), params) < 1e-4

    @pytest.mark.parametrize("kind", ["softmax", "cosface", "arcface"])
    def test_gradient_matches_finite_differences(self, kind, rng):
        head = MarginHead(kind, 3, embedding_dim=4, seed=2)
        zs = ParameterSet()
        z = zs.add("z", rng.normal(0, 1, (5, 4)))
        y = [0, 1, 2, 1, 0]
        params = ParameterSet.combine({"z": zs, "head": head.params})
        assert finite_diff_check(lambda: head.loss(z, y), params) < 1e-4

    @pytest.mark.parametrize(
        "kind,margin",
        [
            ("cosface", 1.0),
            ("cosface", -0.1),
            ("arcface", math.pi / 2),
            ("arcface", 2.0),
        ],
    )
    def test_margin_out_of_range(self, kind, margin):
        with pytest.raises(DomainError):
            MarginHead(kind, 2, margin=margin)

    def test_non_positive_scale(self):
        head = MarginHead("cosface", 2, embedding_dim=2)
        with pytest.raises(DomainError):
            cosface_loss(head, Tensor([[1.0, 0.0]]), [0], s=0.0)

    def test_zero_embedding(self):
        head = MarginHead("arcface", 2, embedding_dim=2)
        with pytest.raises(DomainError):
            arcface_loss(head, Tensor([[0.0, 0.0]]), [0])

    def test_label_out_of_range(self):
        head = MarginHead("cosface", 2, embedding_dim=2)
        with pytest.raises(DomainError):
            cosface_loss(head, Tensor([[1.0, 0.0]]), [2])


class TestTrainRecognizer:
    """End-to-end recognition training on synthetic faces"""

    @pytest.mark.parametrize("kind", ["softmax", "cosface", "arcface"])
    def test_loss_decreases(self, faces, small_cfg, kind):
        run = train_recognizer(faces, kind, small_cfg)
        assert len(run.trace) == 10 * 3
        assert np.mean(run.trace[-3:]) < np.mean(run.trace[:3])

    def test_classes_and_stem(self, faces, small_cfg):
        cfg = small_cfg.model_copy(update={"epochs": 0})
        run = train_recognizer(faces, "cosface", cfg)
        assert run.classes == faces.subject_ids()
        assert run.stem == "run_cosface_4"
        assert run.head.margin == 0.35
        assert run.embed(faces.samples[:3]).shape == (3, 8)

    def test_same_seed_same_trace(self, faces, small_cfg):
        cfg = small_cfg.model_copy(update={"epochs": 2})
        first = train_recognizer(faces, "arcface", cfg)
        assert first.trace == train_recognizer(faces, "arcface", cfg).trace

    def test_single_image_subject(self, small_cfg):
        singles = build_dataset(GenerationConfig.balanced(2, 1))
        with pytest.raises(DataError) as e:
            train_recognizer(singles, "softmax", small_cfg)
        assert e.value.error_data["count"] == 8

    def test_empty_dataset(self, small_cfg):
        with pytest.raises(DataError):
            train_recognizer(DomainDataset([]), "softmax", small_cfg)

    def test_saved_run_reloads(self, faces, small_cfg, tmp_path):
        cfg = small_cfg.model_copy(update={"epochs": 1})
        run = train_recognizer(faces, "arcface", cfg)
        save_run(run, tmp_path)
        loaded = load_run(tmp_path, "arcface", 4)
        assert loaded.trace == run.trace
        assert loaded.fingerprint == faces.fingerprint()
        first_five = faces.samples[:5]
        np.testing.assert_array_equal(loaded.embed(first_five), run.embed(first_five))

    def test_missing_run(self, tmp_path):
        with pytest.raises(ArtifactError):
            load_run(tmp_path, "softmax", 0)
