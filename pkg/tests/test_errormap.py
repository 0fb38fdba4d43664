import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segqa.errormap import (
    ErrorMap,
    SoftErrorMap,
    binarize,
    qi_from_truth,
    quality_indicator,
    true_error_map,
)
from segqa.metrics import segmentation_accuracy
from segqa.volume import LabelMask


def test_equal_masks_have_no_errors():
    m = LabelMask(np.arange(8).reshape(2, 2, 2) % 3, 2)
    assert not true_error_map(m, m).bits.any()


def test_everywhere_different():
    a = LabelMask(np.zeros((2, 3, 2)), 2)
    b = LabelMask(np.ones((2, 3, 2)), 2)
    assert true_error_map(a, b).bits.all()


def test_three_differences():
    gt = np.zeros((2, 2, 2), np.uint8)
    s = gt.copy()
    where = [(0, 0, 1), (1, 0, 0), (1, 1, 1)]
    for i, idx in enumerate(where):
        s[idx] = 1 + i % 2
    e = true_error_map(LabelMask(s, 2), LabelMask(gt, 2))
    expected = np.zeros((2, 2, 2), np.uint8)
    for idx in where:
        expected[idx] = 1
    assert np.array_equal(e.bits, expected)
    assert e.bits.mean() == 3 / 8
    assert quality_indicator(e) == 0.625


def test_true_error_map_mismatch():
    with pytest.raises(ValueError):
        true_error_map(LabelMask(np.zeros((2, 2, 2)), 1), LabelMask(np.zeros((2, 2, 1)), 1))


def test_binarize_examples():
    assert not binarize(SoftErrorMap(np.zeros((2, 2, 2)))).bits.any()
    bits = binarize(SoftErrorMap(np.array([0.4, 0.6]).reshape(1, 1, 2)), 0.5).bits
    assert bits.ravel().tolist() == [0, 1]
    assert binarize(SoftErrorMap(np.full((1, 1, 1), 0.5)), 0.5).bits.item() == 1
    for tau in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            binarize(SoftErrorMap(np.zeros((1, 1, 1))), tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (3, 3, 3), elements=st.floats(0, 1, width=32)),
       st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_binarize_monotone_in_tau(probs, t1, t2):
    lo, hi = sorted((t1, t2))
    soft = SoftErrorMap(probs)
    assert np.all(binarize(soft, hi).bits <= binarize(soft, lo).bits)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (2, 3, 4), elements=st.integers(0, 1)), st.floats(0.001, 1.0))
def test_binarize_identity_on_hard_maps(bits, tau):
    assert np.array_equal(binarize(SoftErrorMap(bits.astype(np.float32)), tau).bits, bits)


def test_quality_indicator_extremes():
    assert quality_indicator(ErrorMap(np.zeros((2, 2, 2)))) == 1.0
    assert quality_indicator(ErrorMap(np.ones((2, 2, 2)))) == 0.0


def test_qi_from_truth_counts():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = rng.integers(0, 4, (4, 5, 6))
        b = rng.integers(0, 4, (4, 5, 6))
        qi = qi_from_truth(LabelMask(a, 3), LabelMask(b, 3))
        matches = sum(int(x == y) for x, y in zip(a.ravel(), b.ravel()))
        assert qi == matches / a.size
        assert qi == segmentation_accuracy(LabelMask(a, 3), LabelMask(b, 3))
    m = LabelMask(a, 3)
    assert qi_from_truth(m, m) == 1.0


def test_error_map_rejects_non_binary():
    with pytest.raises(ValueError):
        ErrorMap(np.array([[[2]]]))
    with pytest.raises(ValueError):
        SoftErrorMap(np.array([[[1.2]]]))


def test_error_map_as_mask():
    m = ErrorMap(np.array([[[0, 1]]])).to_mask()
    assert m.num_classes == 1 and m.labels.tolist() == [[[0, 1]]]
