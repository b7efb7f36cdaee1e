"""Contrastive alignment loss and the trainable projection head."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidkit.alignment import (
    AlignmentBatch,
    AlignmentConfig,
    combined_alignment_loss,
    info_nce_loss,
    load_projection,
    projection_loss,
    save_projection,
    train_projection,
)
from sidkit.autodiff import Tensor
from sidkit.errors import DataError

from conftest import clustered_catalog


class TestInfoNceValues:
    def test_orthogonal_pairs_closed_form(self):
        """B=2 with orthogonal unit pairs at temperature 1: the matched logit
        is 1, the mismatched 0, so the loss is log(1 + e^-1) exactly."""
        batch = AlignmentBatch(np.eye(2), np.eye(2))
        got = info_nce_loss(batch, temperature=1.0)
        np.testing.assert_allclose(got, np.log1p(np.exp(-1.0)), rtol=1e-12)

    def test_indistinguishable_batch_is_log_b(self):
        """All similarities equal -> softmax is uniform -> loss = log B."""
        anchors = np.tile([1.0, 0.0, 0.0], (5, 1))
        positives = np.tile([0.0, 1.0, 0.0], (5, 1))
        got = info_nce_loss(AlignmentBatch(anchors, positives), temperature=0.07)
        np.testing.assert_allclose(got, np.log(5.0), rtol=1e-12)

    def test_loss_is_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b = int(rng.integers(2, 9))
            batch = AlignmentBatch(rng.standard_normal((b, 6)), rng.standard_normal((b, 6)))
            assert info_nce_loss(batch) >= 0.0

    def test_sharp_positive_drives_loss_to_zero(self):
        """A matched pair far more similar than any negative dominates the
        softmax at low temperature."""
        anchors = np.eye(3)
        batch = AlignmentBatch(anchors, anchors)
        assert info_nce_loss(batch, temperature=0.01) < 1e-6

    def test_zero_norm_row_is_named(self):
        anchors = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DataError, match="row 1"):
            info_nce_loss(AlignmentBatch(anchors, np.eye(2)))

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            info_nce_loss(AlignmentBatch(np.eye(2), np.eye(2)), temperature=0.0)

    def test_batch_needs_two_rows(self):
        with pytest.raises(ValueError):
            AlignmentBatch(np.ones((1, 4)), np.ones((1, 4)))


class TestCombinedLoss:
    def test_sum_of_three_terms(self):
        rng = np.random.default_rng(1)
        batches = [
            AlignmentBatch(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))
            for _ in range(3)
        ]
        want = sum(info_nce_loss(b, 0.07) for b in batches)
        got = combined_alignment_loss(*batches, temperature=0.07)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_mismatched_sizes_rejected(self):
        rng = np.random.default_rng(2)
        b4 = AlignmentBatch(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))
        b3 = AlignmentBatch(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
        with pytest.raises(ValueError):
            combined_alignment_loss(b4, b4, b3)


class TestProjectionLossGradient:
    def test_matches_finite_differences(self):
        """Autodiff gradient of the projected InfoNCE agrees with a central
        finite-difference evaluation, parameter by parameter."""
        rng = np.random.default_rng(3)
        batch = AlignmentBatch(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))
        w0 = np.eye(5) + 0.01 * rng.standard_normal((5, 5))
        b0 = 0.01 * rng.standard_normal(5)

        weight, bias = Tensor(w0.copy()), Tensor(b0.copy())
        projection_loss(weight, bias, batch, temperature=0.5).backward()

        def value(w, b):
            return projection_loss(Tensor(w), Tensor(b), batch, temperature=0.5).item()

        h = 1e-5
        for param, tensor in ((w0, weight), (b0, bias)):
            fd = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                up = value(w0, b0)
                param[idx] = orig - h
                down = value(w0, b0)
                param[idx] = orig
                fd[idx] = (up - down) / (2 * h)
            rel = np.abs(tensor.grad - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-3

    def test_plain_numpy_and_graph_paths_agree(self):
        """projection_loss with an identity head equals info_nce_loss."""
        rng = np.random.default_rng(4)
        batch = AlignmentBatch(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)))
        graph = projection_loss(
            Tensor(np.eye(4)), Tensor(np.zeros(4)), batch, temperature=0.07
        ).item()
        np.testing.assert_allclose(graph, info_nce_loss(batch, 0.07), rtol=1e-10)


class TestTrainProjection:
    def test_loss_decreases_on_planted_pairs(self):
        catalog, _ = clustered_catalog(n_items=120, n_clusters=6, d_in=8, seed=5)
        config = AlignmentConfig(epochs=8, batch_size=32, learning_rate=1e-2, seed=7)
        head = train_projection(catalog, config)
        assert len(head.loss_trace) == 9  # pre-training entry + one per epoch
        assert head.loss_trace[-1] < head.loss_trace[0]

    def test_same_seed_is_bitwise_identical(self):
        catalog, _ = clustered_catalog(n_items=60, n_clusters=4, d_in=6, seed=6)
        config = AlignmentConfig(epochs=3, batch_size=16, seed=11)
        first = train_projection(catalog, config)
        second = train_projection(catalog, config)
        np.testing.assert_array_equal(first.weight, second.weight)
        np.testing.assert_array_equal(first.bias, second.bias)
        assert first.loss_trace == second.loss_trace

    def test_zero_epochs_returns_initialization(self):
        catalog, _ = clustered_catalog(n_items=40, n_clusters=4, d_in=6, seed=8)
        head = train_projection(catalog, AlignmentConfig(epochs=0, seed=3))
        assert np.abs(head.weight - np.eye(6)).max() < 0.01  # identity plus small noise
        np.testing.assert_array_equal(head.bias, np.zeros(6))
        assert len(head.loss_trace) == 1

    def test_catalog_without_pairs_rejected(self):
        from sidkit.catalog import ItemCatalog, ItemRecord

        records = [ItemRecord(item_id="a", embedding=np.ones(3))]
        with pytest.raises(DataError):
            train_projection(ItemCatalog(records, d_in=3), AlignmentConfig(epochs=1))


class TestProjectionSerialization:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        catalog, _ = clustered_catalog(n_items=30, n_clusters=3, d_in=5, seed=10)
        head = train_projection(catalog, AlignmentConfig(epochs=2, seed=1))
        path = tmp_path / "head.tsv"
        save_projection(head, path)
        loaded = load_projection(path)
        np.testing.assert_array_equal(loaded.weight, head.weight)
        np.testing.assert_array_equal(loaded.bias, head.bias)
        X = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(loaded.apply(X), head.apply(X))

    def test_malformed_file_rejected(self, tmp_path):
        path = tmp_path / "head.tsv"
        path.write_text("1.0\t2.0\n3.0\t4.0\n")  # 2x2: no room for a bias row
        with pytest.raises(DataError):
            load_projection(path)
