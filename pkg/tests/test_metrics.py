import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefixmatch.autodiff import IGNORE
from densefixmatch.data import Sample
from densefixmatch.metrics import (
    accumulate,
    evaluate_model,
    iou_per_class,
    miou,
    new_confusion,
    write_report,
)
from densefixmatch.model import LayerSpec, init_model, predict, zeros_like_params


def naive_confusion(pred, gt, k):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g != IGNORE:
            cm[g][p] += 1
    return np.array(cm)


def naive_iou(cm):
    k = len(cm)
    out = []
    for c in range(k):
        inter = cm[c][c]
        union = sum(cm[c][j] for j in range(k)) + sum(cm[i][c] for i in range(k)) - inter
        out.append(None if union == 0 else inter / union)
    return out


def random_pair(rng, k, shape=(8, 8), ignore_frac=0.2):
    pred = rng.integers(0, k, shape).astype(np.uint8)
    gt = rng.integers(0, k, shape).astype(np.uint8)
    gt[rng.random(shape) < ignore_frac] = IGNORE
    return pred, gt


class TestAccumulate:
    def test_perfect_is_diagonal(self):
        gt = np.random.default_rng(0).integers(0, 3, (8, 8)).astype(np.uint8)
        cm = accumulate(new_confusion(3), gt, gt)
        assert np.count_nonzero(cm - np.diag(np.diag(cm))) == 0
        assert cm.trace() == 64

    def test_all_ignore_leaves_cm(self):
        cm = np.arange(9).reshape(3, 3)
        out = accumulate(cm, np.zeros((4, 4), np.uint8), np.full((4, 4), IGNORE, np.uint8))
        np.testing.assert_array_equal(out, cm)

    def test_total_counts_valid_pixels(self):
        pred, gt = random_pair(np.random.default_rng(1), 3)
        assert accumulate(new_confusion(3), pred, gt).sum() == np.count_nonzero(gt != IGNORE)

    def test_random_matches_naive(self):
        pred, gt = random_pair(np.random.default_rng(2), 3)
        np.testing.assert_array_equal(accumulate(new_confusion(3), pred, gt), naive_confusion(pred, gt, 3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accumulate(new_confusion(2), np.zeros((2, 3), np.uint8), np.zeros((3, 2), np.uint8))


class TestIoU:
    def test_perfect(self):
        gt = np.array([[0, 1], [1, 0]], np.uint8)
        assert iou_per_class(accumulate(new_confusion(3), gt, gt)) == [1.0, 1.0, None]

    def test_direct_formula(self):
        assert iou_per_class(np.array([[2, 1], [1, 2]])) == [0.5, 0.5]

    def test_miou_examples(self):
        assert miou(np.array([[3, 0], [2, 0]])) == (0.3, pytest.approx(0.3))
        assert miou(np.array([[1, 0], [0, 0]])) == (1.0, 0.0)
        # class 1 pixels all predicted as 2: IoUs [1, 0, 0]
        cm = np.array([[4, 0, 0], [0, 0, 3], [0, 0, 0]])
        assert iou_per_class(cm) == [1.0, 0.0, 0.0]
        assert miou(cm) == (pytest.approx(1 / 3), pytest.approx(np.sqrt(2) / 3))

    def test_equal_ious_have_zero_std(self):
        assert miou(np.array([[2, 1], [1, 2]]))[1] == 0.0

    def test_undefined_switch(self):
        cm = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
        assert miou(cm) == (1.0, 0.0)
        assert miou(cm, undefined_as_zero=True)[0] == pytest.approx(2 / 3)

    def test_all_undefined(self):
        with pytest.raises(ValueError):
            miou(new_confusion(3))


def test_hundred_random_cases_match_naive_exactly():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        pred, gt = random_pair(rng, k, (int(rng.integers(1, 12)), int(rng.integers(1, 12))), 0.3)
        cm = accumulate(new_confusion(k), pred, gt)
        ref = naive_confusion(pred, gt, k)
        np.testing.assert_array_equal(cm, ref)
        assert iou_per_class(cm) == naive_iou(ref.tolist())
        defined = [v for v in naive_iou(ref.tolist()) if v is not None]
        if defined:
            mean = sum(defined) / len(defined)
            assert miou(cm)[0] == mean


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_accumulation_order_independent(seed, n):
    rng = np.random.default_rng(seed)
    pairs = [random_pair(rng, 4, (5, 5)) for _ in range(n)]
    a = new_confusion(4)
    for p, g in pairs:
        a = accumulate(a, p, g)
    b = new_confusion(4)
    for i in rng.permutation(n):
        b = accumulate(b, *pairs[i])
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_miou_invariant_to_relabeling(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pair(rng, 4, (6, 6))
    perm = rng.permutation(4).astype(np.uint8)
    gt2 = np.where(gt == IGNORE, IGNORE, perm[np.minimum(gt, 3)]).astype(np.uint8)
    a = miou(accumulate(new_confusion(4), pred, gt))
    b = miou(accumulate(new_confusion(4), perm[pred], gt2))
    assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)


class TestEvaluateModel:
    def samples(self, n=3, k=4):
        rng = np.random.default_rng(5)
        return [Sample(rng.random((3, 10, 10)), rng.integers(0, k, (10, 10)).astype(np.uint8), i) for i in range(n)]

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_model(init_model(0), [])

    def test_uniform_model_against_naive_oracle(self):
        data = self.samples()
        params = zeros_like_params(init_model(0))
        res = evaluate_model(params, data)
        # ties resolve to class 0 under argmax
        preds = predict(params, np.stack([s.image for s in data])).data.argmax(axis=1)
        assert np.all(preds == 0)
        ref = naive_confusion(preds, np.stack([s.labels for s in data]), 4)
        assert res["confusion"] == ref.tolist()
        assert res["per_class_iou"] == naive_iou(ref.tolist())
        assert abs(sum(res["pixel_percent"]) - 100) < 1e-9

    def test_teacher_and_student_give_distinct_numbers(self):
        data = self.samples()
        spec = LayerSpec((3, 8), 3, 4)
        a = evaluate_model(init_model(1, spec), data)["per_class_iou"]
        b = evaluate_model(init_model(2, spec), data)["per_class_iou"]
        assert a != b

    def test_report(self, tmp_path):
        res = evaluate_model(init_model(0), self.samples())
        write_report(tmp_path / "r.json", res, split=1, seed=3, checkpoint="x.npz")
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["split"] == 1 and d["miou"] == res["miou"] and len(d["pixel_percent"]) == 4
