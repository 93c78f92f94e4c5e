import itertools
import math

import numpy as np
import pytest
import torch

from medssc.artifacts import load_checkpoint, save_checkpoint
from medssc.config import SegModelConfig
from medssc.corpus import PUBMED_LABELS
from medssc.segment_model import (
    SegmentMLP,
    aggregate_to_sentences,
    build_segment_model,
    kl_loss,
    make_segments,
    make_segments_unlabeled,
    mlp_forward,
    model_meta,
    predict_segments,
    segment_soft_label,
    train_seg,
)
from medssc.training import load_state, set_seed


def brute_force_soft_label(rows):
    """Independent elementwise oracle: sum every entry one by one."""
    width = len(rows[0])
    sums = [0.0] * width
    denominator = 0.0
    for row in rows:
        for l in range(width):
            sums[l] += row[l]
            denominator += row[l]
    return [s / denominator for s in sums]


class TestSoftLabels:
    def test_two_to_one_mix(self):
        rows = np.eye(5)[[0, 0, 1]]
        np.testing.assert_allclose(segment_soft_label(rows), [2 / 3, 1 / 3, 0, 0, 0], atol=1e-9)

    def test_pure_segment(self):
        rows = np.eye(5)[[2, 2, 2]]
        np.testing.assert_allclose(segment_soft_label(rows), np.eye(5)[2], atol=1e-9)

    def test_exhaustive_onehot_triples(self):
        for triple in itertools.product(range(5), repeat=3):
            rows = np.eye(5)[list(triple)]
            ours = segment_soft_label(rows)
            oracle = brute_force_soft_label(rows.tolist())
            np.testing.assert_allclose(ours, oracle, atol=1e-9)
            assert abs(ours.sum() - 1.0) <= 1e-9
            assert set(np.nonzero(ours)[0]) == set(triple)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="no labeled"):
            segment_soft_label(np.zeros((3, 5)))


class TestMakeSegments:
    def _label_rows(self, count, seed=0):
        rng = np.random.default_rng(seed)
        return np.eye(5, dtype=np.float32)[rng.integers(0, 5, size=count)]

    def test_count_ten_sentences(self):
        segments = make_segments(np.zeros((10, 5)), self._label_rows(10), "a", 3)
        assert len(segments) == 8
        assert [s.start for s in segments] == list(range(8))

    def test_boundary_exact_window(self):
        segments = make_segments(np.zeros((3, 5)), self._label_rows(3), "a", 3)
        assert len(segments) == 1
        assert segments[0].covered == 3

    def test_short_abstract_padded(self):
        rows = self._label_rows(2)
        matrix = np.arange(10, dtype=np.float32).reshape(2, 5)
        segments = make_segments(matrix, rows, "a", 3)
        assert len(segments) == 1
        segment = segments[0]
        assert segment.covered == 2
        # padded slot contributes zeros to both vector and soft-label numerator
        np.testing.assert_array_equal(segment.vector[10:], np.zeros(5))
        np.testing.assert_allclose(segment.soft_label, rows.sum(axis=0) / 2, atol=1e-9)

    def test_random_counts(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            count = int(rng.integers(3, 31))
            segments = make_segments(np.zeros((count, 5)), self._label_rows(count), "a", 3)
            assert len(segments) == count - 3 + 1

    def test_vector_is_window_concat(self):
        matrix = np.arange(20, dtype=np.float32).reshape(4, 5)
        segments = make_segments(matrix, self._label_rows(4), "a", 3)
        np.testing.assert_array_equal(segments[1].vector, matrix[1:4].reshape(-1))

    def test_unlabeled_matches_geometry(self):
        matrix = np.random.default_rng(0).random((6, 5)).astype(np.float32)
        labeled = make_segments(matrix, self._label_rows(6), "a", 3)
        unlabeled = make_segments_unlabeled(matrix, "a", 3)
        assert [(s.start, s.covered) for s in labeled] == [
            (s.start, s.covered) for s in unlabeled
        ]
        assert all(s.soft_label is None for s in unlabeled)


class TestSegmentMLP:
    def _model(self, input_width=15, n_labels=5, seed=0):
        set_seed(seed)
        return SegmentMLP(input_width, n_labels, SegModelConfig())

    def test_output_distribution(self):
        model = self._model()
        model.eval()
        with torch.no_grad():
            probs = mlp_forward(model, torch.randn(4, 15))
        assert probs.shape == (4, 5)
        np.testing.assert_allclose(probs.sum(dim=1).numpy(), 1.0, atol=1e-6)

    def test_block_width_trace(self):
        for n_labels in (5, 6):
            model = self._model(input_width=3 * n_labels, n_labels=n_labels)
            assert model.block_output_widths == (512, 256, 128, 64, n_labels)
            model.eval()
            x = torch.randn(3, 3 * n_labels)
            widths = []
            with torch.no_grad():
                for block in model.blocks:
                    x = block(x)
                    widths.append(x.shape[1])
                widths.append(model.head(x).shape[1])
            assert tuple(widths) == (512, 256, 128, 64, n_labels)

    def test_eval_mode_deterministic(self):
        model = self._model()
        model.eval()
        x = torch.randn(8, 15)
        with torch.no_grad():
            a, b = mlp_forward(model, x), mlp_forward(model, x)
        torch.testing.assert_close(a, b)

    def test_dropout_active_in_train_mode(self):
        model = self._model()
        model.train()
        x = torch.randn(8, 15)
        set_seed(1)
        a = mlp_forward(model, x)
        set_seed(2)
        b = mlp_forward(model, x)
        assert not torch.allclose(a, b)

    def test_width_mismatch_rejected(self):
        model = self._model()
        with pytest.raises(ValueError, match="width"):
            mlp_forward(model, torch.randn(2, 14))


class TestKlLoss:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            y = rng.dirichlet(np.ones(5), size=3)
            assert float(kl_loss(y, y)) == pytest.approx(0.0, abs=1e-9)

    def test_analytic_half(self):
        y = np.array([[1.0, 0, 0, 0, 0]])
        pred = np.array([[0.5, 0.5, 0, 0, 0]])
        assert float(kl_loss(y, pred)) == pytest.approx(math.log(2), abs=1e-4)

    def test_l2_floor(self):
        rng = np.random.default_rng(1)
        weights = [torch.tensor(rng.standard_normal((4, 4)))]
        penalty = 0.0001 / 2 * float((weights[0] ** 2).sum())
        for _ in range(20):
            y = rng.dirichlet(np.ones(5), size=2)
            pred = rng.dirichlet(np.ones(5), size=2)
            loss = float(kl_loss(y, pred, weights, l2=0.0001))
            assert loss >= penalty - 1e-12

    def test_batch_is_sum_not_mean(self):
        y = np.array([[1.0, 0, 0, 0, 0]])
        pred = np.array([[0.5, 0.5, 0, 0, 0]])
        single = float(kl_loss(y, pred))
        double = float(kl_loss(np.repeat(y, 2, axis=0), np.repeat(pred, 2, axis=0)))
        assert double == pytest.approx(2 * single, rel=1e-9)

    def test_zero_prediction_clamped(self):
        y = np.array([[1.0, 0.0]])
        pred = np.array([[0.0, 1.0]])
        assert math.isfinite(float(kl_loss(y, pred)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = torch.tensor(rng.standard_normal((3, 5)), requires_grad=True)
        y = torch.as_tensor(rng.dirichlet(np.ones(5), size=3))
        weight = torch.tensor(rng.standard_normal((4, 4)), requires_grad=True)

        def f(z, w):
            return kl_loss(y, torch.softmax(z, dim=1), [w], l2=0.001)

        f(logits, weight).backward()
        h = 1e-6
        for tensor in (logits, weight):
            analytic = tensor.grad.numpy()
            fd = np.zeros_like(analytic)
            base = tensor.detach().clone()
            for index in np.ndindex(*base.shape):
                up, down = base.clone(), base.clone()
                up[index] += h
                down[index] -= h
                if tensor is logits:
                    fd[index] = (float(f(up, weight.detach())) - float(f(down, weight.detach()))) / (2 * h)
                else:
                    fd[index] = (float(f(logits.detach(), up)) - float(f(logits.detach(), down))) / (2 * h)
            rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic), 1e-12)
            assert rel < 1e-4


class TestAggregation:
    def _segments(self, count, seed=0):
        rng = np.random.default_rng(seed)
        matrix = rng.random((count, 5)).astype(np.float32)
        labels = np.eye(5, dtype=np.float32)[rng.integers(0, 5, size=count)]
        return make_segments(matrix, labels, "a", 3)

    def test_coverage_counting(self):
        segments = self._segments(10)
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(5), size=len(segments))
        out = aggregate_to_sentences(segments, probs, {"a": 10})
        expected_mid = probs[[3, 4, 5]].mean(axis=0)  # covered by windows starting at 3, 4, 5
        np.testing.assert_allclose(out["a"].scores[5], expected_mid, atol=1e-12)
        np.testing.assert_allclose(out["a"].scores[0], probs[0], atol=1e-12)  # window 0 only

    def test_identical_predictions_pass_through(self):
        segments = self._segments(7)
        row = np.full(5, 0.2)
        probs = np.tile(row, (len(segments), 1))
        out = aggregate_to_sentences(segments, probs, {"a": 7})
        np.testing.assert_allclose(out["a"].scores, np.tile(row, (7, 1)), atol=1e-12)

    def test_means_are_distributions(self):
        segments = self._segments(9, seed=3)
        probs = np.random.default_rng(4).dirichlet(np.ones(5), size=len(segments))
        out = aggregate_to_sentences(segments, probs, {"a": 9})
        np.testing.assert_allclose(out["a"].scores.sum(axis=1), 1.0, atol=1e-9)

    def test_short_abstract_covered_by_padded_segment(self):
        rng = np.random.default_rng(5)
        matrix = rng.random((2, 5)).astype(np.float32)
        labels = np.eye(5, dtype=np.float32)[[0, 1]]
        segments = make_segments(matrix, labels, "a", 3)
        probs = rng.dirichlet(np.ones(5), size=1)
        out = aggregate_to_sentences(segments, probs, {"a": 2})
        np.testing.assert_allclose(out["a"].scores, np.tile(probs[0], (2, 1)), atol=1e-12)

    def test_uncovered_sentence_rejected(self):
        segments = self._segments(5)
        probs = np.full((len(segments), 5), 0.2)
        with pytest.raises(ValueError, match="covered by no segment"):
            aggregate_to_sentences(segments, probs, {"a": 6})

    def test_max_mode(self):
        segments = self._segments(4, seed=6)
        probs = np.random.default_rng(7).dirichlet(np.ones(5), size=len(segments))
        out = aggregate_to_sentences(segments, probs, {"a": 4}, mode="max")
        np.testing.assert_allclose(out["a"].scores[1], np.maximum(probs[0], probs[1]), atol=1e-12)

    def test_id_relabeling_consistent(self):
        segments = self._segments(6, seed=8)
        probs = np.random.default_rng(9).dirichlet(np.ones(5), size=len(segments))
        renamed = [
            type(s)(abstract_id="zz", start=s.start, vector=s.vector,
                    soft_label=s.soft_label, covered=s.covered)
            for s in segments
        ]
        a = aggregate_to_sentences(segments, probs, {"a": 6})["a"].scores
        b = aggregate_to_sentences(renamed, probs, {"zz": 6})["zz"].scores
        np.testing.assert_array_equal(a, b)


class TestTrainSeg:
    def _segments_with_signal(self, corpus, seed):
        rng = np.random.default_rng(seed)
        segments = []
        for abstract in corpus.abstracts:
            labels = np.eye(5, dtype=np.float32)[
                [PUBMED_LABELS.index(s.label) for s in abstract.sentences]
            ]
            matrix = labels * 2.0 + rng.standard_normal((len(abstract), 5)).astype(np.float32) * 0.3
            segments.extend(make_segments(matrix, labels, abstract.id, 3))
        return segments

    def test_smoke_and_reload(self, tiny_corpus, tmp_path, featurized_fixture):
        train_segments = self._segments_with_signal(tiny_corpus, 1)
        val_segments = self._segments_with_signal(featurized_fixture["val_corpus"], 2)
        config = SegModelConfig(epochs=2, batch_size=16)
        model, result = train_seg(train_segments, val_segments, PUBMED_LABELS, config, seed=5)
        assert len(result.history) == 2
        assert result.history[1].train_loss < result.history[0].train_loss

        path = tmp_path / "seg.npz"
        save_checkpoint(path, result.state, {"model": model_meta(model)})
        state, meta = load_checkpoint(path)
        rebuilt = build_segment_model(meta["model"])
        load_state(rebuilt, state)
        rebuilt.eval()
        np.testing.assert_array_equal(
            predict_segments(rebuilt, val_segments), predict_segments(model, val_segments)
        )
