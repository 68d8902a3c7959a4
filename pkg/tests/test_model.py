import numpy as np
import pytest

from rankuap import autodiff as ad
from rankuap.dataset import synth_generate
from rankuap.errors import ConfigurationError, FormatError, ShapeError
from rankuap.evaluate import EvalContext
from rankuap.model import (
    ArchSpec,
    ConvSpec,
    EmbeddingModel,
    descriptor_table,
    extract_descriptor,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    train_victim,
)
from rankuap.resizing import ResizePolicy


@pytest.fixture(scope="module")
def tiny_dataset():
    return synth_generate(num_classes=3, per_class=8, base_size=32, seed=0)


class TestArchSpec:
    def test_descriptor_dim(self):
        assert ArchSpec().descriptor_dim == 32

    def test_unknown_pooling(self):
        with pytest.raises(ConfigurationError):
            ArchSpec(pooling="avg")

    def test_min_input_default(self):
        # three stride-2 convs with padding survive small inputs
        assert ArchSpec().min_input >= 1

    def test_dict_round_trip(self):
        arch = ArchSpec(convs=(ConvSpec(4), ConvSpec(8, kernel=5)), pooling="mac")
        assert ArchSpec.from_dict(arch.to_dict()) == arch


class TestEmbeddingModel:
    def test_descriptor_unit_norm(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        rng = np.random.default_rng(0)
        for size in (32, 48, 77):
            img = np.asarray(rng.uniform(0, 255, size=(3, size, size)))
            desc = model.descriptor(img)
            assert desc.shape == (32,)
            assert np.linalg.norm(desc) == pytest.approx(1.0)

    def test_size_below_minimum_rejected(self):
        arch = ArchSpec(convs=(ConvSpec(4, padding=0),))
        model = EmbeddingModel(arch, seed=0)
        with pytest.raises(ShapeError):
            model.descriptor(np.zeros((3, 2, 2)))

    def test_non_chw_rejected(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        with pytest.raises(ShapeError):
            model.descriptor_tensor(ad.Tensor(np.zeros((3, 2, 32, 32))))

    def test_frozen_blocks_parameter_grads(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        rng = np.random.default_rng(1)
        x = ad.Tensor(np.asarray(rng.uniform(0, 255, size=(3, 32, 32))), requires_grad=True)
        desc = model.descriptor_tensor(x, frozen=True)
        ad.backward(ad.index(desc, 0))
        assert x.grad is not None
        for p in model.parameters():
            assert p.grad is None

    def test_deterministic_init(self):
        a = EmbeddingModel(ArchSpec(), seed=4)
        b = EmbeddingModel(ArchSpec(), seed=4)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa.data, wb.data)

    def test_extract_descriptor_validates_range(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        with pytest.raises(ShapeError):
            extract_descriptor(model, np.full((3, 32, 32), 300.0))

    def test_descriptor_table_resizes(self, tiny_dataset):
        model = EmbeddingModel(ArchSpec(), seed=0)
        table = descriptor_table(model, tiny_dataset.images[:4], size=32)
        assert table.shape == (4, 32)
        np.testing.assert_allclose(np.linalg.norm(table, axis=1), 1.0)


class TestVictimTraining:
    def test_loss_decreases_and_map_stays_high(self, tiny_dataset):
        policy = ResizePolicy.fixed(32)
        model = train_victim(tiny_dataset, seed=0, epochs=4, aug_sides=(32, 48))
        trained_map = EvalContext(model, tiny_dataset, policy, seed=0).evaluate(None).clean_map
        assert model.train_history[-1] < model.train_history[0]
        assert trained_map >= 0.9

    def test_deterministic(self, tiny_dataset):
        a = train_victim(tiny_dataset, seed=1, epochs=2, aug_sides=(32, 40))
        b = train_victim(tiny_dataset, seed=1, epochs=2, aug_sides=(32, 40))
        for (wa, _), (wb, _) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa.data, wb.data)

    def test_rejects_degenerate_corpus(self):
        ds = synth_generate(num_classes=2, per_class=4, base_size=32, seed=0)
        ds.labels[:] = 0
        ds.labels[ds.query_indices] = 0
        with pytest.raises(ConfigurationError):
            train_victim(ds, epochs=1)

    def test_history_recorded(self, tiny_dataset):
        model = train_victim(tiny_dataset, seed=0, epochs=3, aug_sides=(32, 40))
        assert len(model.train_history) == 3


class TestClassifierHead:
    def test_logits_require_head(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        with pytest.raises(ConfigurationError):
            model.logits_tensor(ad.Tensor(np.zeros(32)))

    def test_training_separates_clusters(self):
        rng = np.random.default_rng(2)
        descs = np.concatenate([
            rng.normal(loc=(1, 0), scale=0.1, size=(20, 2)),
            rng.normal(loc=(0, 1), scale=0.1, size=(20, 2)),
        ])
        labels = np.repeat([0, 1], 20)
        model = EmbeddingModel(ArchSpec(), seed=0)
        train_classifier(model, descs, labels, seed=0)
        w, b = model.classifier
        logits = descs @ w.data.T + b.data
        assert (logits.argmax(axis=1) == labels).mean() >= 0.95

    def test_needs_two_classes(self):
        model = EmbeddingModel(ArchSpec(), seed=0)
        with pytest.raises(ConfigurationError):
            train_classifier(model, np.zeros((4, 2)), np.zeros(4, dtype=int))


class TestCheckpointIO:
    def test_round_trip_bit_identical(self, tiny_dataset, tmp_path):
        model = train_victim(tiny_dataset, seed=0, epochs=1, aug_sides=(32, 40))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        img = tiny_dataset.images[0]
        np.testing.assert_array_equal(back.descriptor(img), model.descriptor(img))
        assert back.metadata["dataset_hash"] == model.metadata["dataset_hash"]

    def test_classifier_preserved(self, tmp_path):
        model = EmbeddingModel(ArchSpec(), seed=0)
        rng = np.random.default_rng(3)
        train_classifier(model, rng.normal(size=(10, 32)), np.arange(10) % 2, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        np.testing.assert_array_equal(back.classifier[0].data, model.classifier[0].data)

    def test_wrong_kind_rejected(self, tmp_path):
        from rankuap.container import save_container

        path = tmp_path / "bad.ckpt"
        save_container(path, {"kind": "mystery", "version": 1}, [np.zeros(2)])
        with pytest.raises(FormatError):
            load_checkpoint(path)
