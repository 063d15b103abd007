import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairfuse import metrics
from pairfuse.errors import EmptyInput, ShapeMismatch, ZeroClassCount

from conftest import assert_close_grad, fd_gradient


class TestClassWeights:
    def test_ida_bd_row(self):
        w = metrics.class_weights([9749, 3291, 1148, 42]).w
        np.testing.assert_allclose(w, [0.365, 1.081, 3.099, 84.702], atol=1e-3)

    def test_xview2_row(self):
        w = metrics.class_weights([97389, 11754, 12897, 7940]).w
        np.testing.assert_allclose(w, [0.334, 2.765, 2.520, 4.093], atol=1e-3)

    def test_balanced_counts_unit_weights(self):
        np.testing.assert_allclose(metrics.class_weights([10, 10, 10, 10]).w,
                                   np.ones(4))

    def test_zero_count_rejected(self):
        with pytest.raises(ZeroClassCount):
            metrics.class_weights([5, 0, 3, 2])

    @given(st.lists(st.integers(1, 10_000), min_size=1, max_size=8),
           st.integers(1, 50))
    @settings(max_examples=50, deadline=None)
    def test_weight_identity_and_scale_invariance(self, counts, k):
        counts = np.asarray(counts)
        w = metrics.class_weights(counts).w
        # algebraic identity of the weight formula
        np.testing.assert_allclose(np.sum(counts * w), counts.sum(), rtol=1e-12)
        w_scaled = metrics.class_weights(counts * k).w
        np.testing.assert_allclose(w, w_scaled, rtol=1e-12)


class TestWeightedMse:
    def batch(self, y, yhat, labels):
        return metrics.LossBatch(targets=np.asarray(y, dtype=np.float64),
                                 predictions=np.asarray(yhat, dtype=np.float64),
                                 labels=np.asarray(labels))

    def test_perfect_prediction_zero(self):
        y = metrics.one_hot([0, 1, 3], 4)
        w = metrics.class_weights([1, 1, 1, 1])
        assert metrics.weighted_mse(self.batch(y, y.copy(), [0, 1, 3]), w) == 0.0

    def test_direct_evaluation(self):
        w = metrics.ClassWeights(w=np.array([1.0, 1.0]))
        loss = metrics.weighted_mse(
            self.batch([[1.0, 0.0]], [[0.5, 0.5]], [0]), w)
        assert loss == pytest.approx(0.5)

    def test_linear_in_weight(self):
        w1 = metrics.ClassWeights(w=np.array([2.0, 1.0]))
        w2 = metrics.ClassWeights(w=np.array([4.0, 1.0]))
        b = self.batch([[1.0, 0.0]], [[0.2, 0.3]], [0])
        assert metrics.weighted_mse(b, w2) == pytest.approx(
            2 * metrics.weighted_mse(b, w1))

    def test_nonnegative_and_zero_iff_equal(self, rng):
        w = metrics.class_weights([3, 2, 1, 1])
        for _ in range(20):
            y = metrics.one_hot(rng.integers(0, 4, 5), 4)
            yhat = rng.standard_normal((5, 4))
            labels = np.argmax(y, axis=1)
            loss = metrics.weighted_mse(self.batch(y, yhat, labels), w)
            assert loss > 0
        y = metrics.one_hot([2, 0], 4)
        assert metrics.weighted_mse(self.batch(y, y.copy(), [2, 0]), w) == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        labels = rng.integers(0, 4, 6)
        y = metrics.one_hot(labels, 4)
        yhat = rng.standard_normal((6, 4))
        w = metrics.class_weights([9, 5, 3, 2])
        batch = self.batch(y, yhat, labels)
        grad = metrics.weighted_mse_grad(batch, w)
        expected = (2 / 6) * w.w[labels][:, None] * (yhat - y)
        np.testing.assert_allclose(grad, expected, rtol=1e-12)

        def loss():
            return metrics.weighted_mse(self.batch(y, yhat, labels), w)

        assert_close_grad(grad, fd_gradient(loss, yhat, step=1e-6), rtol=1e-6,
                          atol=1e-10)

    def test_shape_mismatch(self):
        w = metrics.class_weights([1, 1])
        with pytest.raises(ShapeMismatch):
            metrics.weighted_mse(self.batch([[1, 0]], [[1, 0, 0]], [0]), w)


class TestPrediction:
    def test_argmax(self):
        assert metrics.predict_label([0.1, 0.9, 0.2, 0.3]) == 1

    def test_tie_breaks_low(self):
        assert metrics.predict_label([0.5, 0.5, 0.0, 0.0]) == 0

    def test_one_hot_maps_to_hot_index(self):
        for i in range(4):
            assert metrics.predict_label(metrics.one_hot([i], 4)[0]) == i


class TestAccuracy:
    def test_all_right(self):
        assert metrics.accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_all_wrong(self):
        assert metrics.accuracy([1, 2, 3], [0, 0, 0]) == 0.0

    def test_half(self):
        assert metrics.accuracy([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5

    def test_empty(self):
        with pytest.raises(EmptyInput):
            metrics.accuracy([], [])


class TestMacroF1:
    def test_perfect(self):
        labels = [0, 1, 2, 3, 0, 1]
        assert metrics.macro_f1(labels, labels, 4) == 1.0

    def test_hand_case(self):
        # class 0: tp=1 fp=1 fn=0 -> F1 = 2/3; class 1: tp=0 fn=1 -> F1 = 0
        assert metrics.macro_f1([0, 0], [0, 1], 2) == pytest.approx(1 / 3)

    def test_zero_support_convention(self):
        # classes 1..3 have no labels and no predictions: F1 contributes 0
        assert metrics.macro_f1([0, 0], [0, 0], 4) == pytest.approx(0.25)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=1, max_size=30),
           st.randoms(use_true_random=False))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, pairs, rnd):
        preds = [p for p, _ in pairs]
        labels = [l for _, l in pairs]
        before_f1 = metrics.macro_f1(preds, labels, 4)
        before_acc = metrics.accuracy(preds, labels)
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        preds2 = [preds[i] for i in order]
        labels2 = [labels[i] for i in order]
        assert metrics.macro_f1(preds2, labels2, 4) == pytest.approx(before_f1)
        assert metrics.accuracy(preds2, labels2) == pytest.approx(before_acc)


class TestConfusion:
    def test_perfect_is_diagonal(self):
        labels = [0, 1, 2, 3, 2]
        mat = metrics.confusion_matrix(labels, labels, 4)
        assert np.array_equal(mat, np.diag([1, 1, 2, 1]))

    def test_single_sample(self):
        mat = metrics.confusion_matrix([0], [3], 4)
        expected = np.zeros((4, 4), dtype=int)
        expected[3, 0] = 1
        assert np.array_equal(mat, expected)

    def test_row_sums_are_label_counts(self, rng):
        labels = rng.integers(0, 4, 50)
        preds = rng.integers(0, 4, 50)
        mat = metrics.confusion_matrix(preds, labels, 4)
        assert mat.sum() == 50
        np.testing.assert_array_equal(mat.sum(axis=1), np.bincount(labels, minlength=4))
