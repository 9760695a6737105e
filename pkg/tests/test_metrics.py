import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dice_coefficient_ref, hausdorff_ref
from partialseg.errors import ShapeMismatch
from partialseg.label_space import LabelSpace, identity_partition, single_organ_partition
from partialseg.metrics import (
    argmax_predict,
    dice_coefficient,
    evaluate_dataset,
    hausdorff_distance,
    image_diagonal,
    write_metric_rows,
)

SPACE = LabelSpace(("bg", "a", "b", "c"))


def test_argmax_predict():
    assert argmax_predict(np.array([0.2, 0.3, 0.5])) == 2
    assert argmax_predict(np.array([0.5, 0.5, 0.0])) == 0
    gt = np.random.default_rng(0).integers(0, 4, size=(5, 5))
    assert (argmax_predict(np.eye(4)[gt]) == gt).all()


def test_dice_examples():
    a = np.array([[1, 1, 0, 0], [1, 1, 0, 0]])
    assert dice_coefficient(a, a, 1) == 1.0
    assert dice_coefficient(a, 1 - a, 1) == 0.0
    b = np.array([[1, 1, 1, 1], [0, 0, 0, 0]])
    assert dice_coefficient(a, b, 1) == 0.5
    assert dice_coefficient(np.zeros((2, 2), int), np.zeros((2, 2), int), 1) == 1.0
    with pytest.raises(ShapeMismatch):
        dice_coefficient(a, a[:, :2], 1)


def _points(shape, pts):
    m = np.zeros(shape, int)
    for p in pts:
        m[p] = 1
    return m


def test_hausdorff_examples():
    a = _points((6, 6), [(0, 0)])
    assert hausdorff_distance(a, a, 1) == (0.0, False)
    assert hausdorff_distance(a, _points((6, 6), [(3, 4)]), 1) == (5.0, False)
    assert hausdorff_distance(a, _points((6, 6), [(0, 0), (0, 3)]), 1) == (3.0, False)


def test_hausdorff_empty_sentinel():
    a = _points((3, 4), [(0, 0)])
    d, flag = hausdorff_distance(a, np.zeros((3, 4), int), 1)
    assert flag and d == pytest.approx(5.0) == image_diagonal((3, 4))


masks = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(
        lambda w: st.tuples(
            st.lists(st.integers(0, 2), min_size=h * w, max_size=h * w).map(lambda v: np.array(v).reshape(h, w)),
            st.lists(st.integers(0, 2), min_size=h * w, max_size=h * w).map(lambda v: np.array(v).reshape(h, w)),
        )
    )
)


@given(masks)
@settings(max_examples=100, deadline=None)
def test_metric_symmetry(pair):
    a, b = pair
    assert dice_coefficient(a, b, 1) == dice_coefficient(b, a, 1)
    assert hausdorff_distance(a, b, 1) == hausdorff_distance(b, a, 1)


@given(masks)
@settings(max_examples=100, deadline=None)
def test_identity_characterizations(pair):
    a, b = pair
    same = np.array_equal(a == 1, b == 1)
    assert (dice_coefficient(a, b, 1) == 1.0) == same
    d, flag = hausdorff_distance(a, b, 1)
    if not flag:
        assert (d == 0.0) == same


@given(masks, st.integers(0, 5), st.integers(0, 5))
@settings(max_examples=60, deadline=None)
def test_hausdorff_translation_invariance(pair, dy, dx):
    a, b = pair
    h, w = a.shape
    pad = lambda m: np.pad(m, ((dy, 5 - dy), (dx, 5 - dx)))
    base = np.pad(a, ((0, 5), (0, 5))), np.pad(b, ((0, 5), (0, 5)))
    d0, f0 = hausdorff_distance(*base, 1)
    d1, f1 = hausdorff_distance(pad(a), pad(b), 1)
    assert f0 == f1
    if not f0:
        assert d0 == pytest.approx(d1, abs=1e-12)


def test_against_brute_force_small():
    rng = np.random.default_rng(11)
    for _ in range(30):
        a = (rng.random((9, 7)) < 0.3).astype(int)
        b = (rng.random((9, 7)) < 0.3).astype(int)
        assert dice_coefficient(a, b, 1) == dice_coefficient_ref(a, b, 1)
        if a.any() and b.any():
            assert hausdorff_distance(a, b, 1)[0] == pytest.approx(hausdorff_ref(a, b, 1), abs=1e-12)


def test_evaluate_full_dataset_perfect():
    rng = np.random.default_rng(0)
    gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
    rep = evaluate_dataset(gts, gts, identity_partition(SPACE), "F")
    assert rep.per_class_dice == {1: 1.0, 2: 1.0, 3: 1.0}
    assert rep.per_class_hausdorff == {1: 0.0, 2: 0.0, 3: 0.0}
    assert rep.mean_dice == 1.0 and rep.mean_hd == 0.0
    assert len(rep.rows) == 9


def test_evaluate_partial_dataset_scores_kept_classes_only():
    gt = np.zeros((8, 8), int)
    gt[1:3, 1:3] = 1
    gt[5:7, 5:7] = 2
    pred = gt.copy()
    pred[5:7, 5:7] = 3  # unannotated organ confused: invisible under the merge
    rep = evaluate_dataset([pred], [gt], single_organ_partition(SPACE, {1}), "P1")
    assert list(rep.per_class_dice) == [1]
    assert rep.per_class_dice[1] == 1.0


def test_far_false_positive_blob_moves_hd_not_dice():
    gt = np.zeros((32, 32), int)
    gt[4:14, 4:14] = 1
    pred = gt.copy()
    pred[30, 30] = 1
    part = single_organ_partition(SPACE, {1})
    clean = evaluate_dataset([gt], [gt], part)
    noisy = evaluate_dataset([pred], [gt], part)
    # brute force on the fixture
    assert noisy.per_class_dice[1] == pytest.approx(dice_coefficient_ref(pred, gt, 1))
    assert noisy.per_class_hausdorff[1] == pytest.approx(hausdorff_ref(pred, gt, 1))
    assert noisy.per_class_dice[1] == pytest.approx(200 / 201)
    assert noisy.per_class_hausdorff[1] == pytest.approx(math.hypot(17, 17))
    assert clean.per_class_dice[1] - noisy.per_class_dice[1] < 0.01
    assert noisy.per_class_hausdorff[1] - clean.per_class_hausdorff[1] > 20


def test_sentinel_excluded_from_mean_hd():
    gt = np.zeros((4, 4), int)
    gt[0, 0] = 1
    gt[3, 3] = 2
    pred = np.zeros((4, 4), int)
    pred[0, 0] = 1
    rep = evaluate_dataset([pred], [gt], identity_partition(SPACE))
    assert rep.hd_sentinel[2] is True
    assert rep.mean_hd == 0.0  # class 1 only; class 3 absent in both also sentinel
    assert rep.per_class_dice[3] == 1.0


def test_metric_csv(tmp_path):
    gt = np.zeros((4, 4), int)
    rep = evaluate_dataset([gt], [gt], single_organ_partition(SPACE, {2}), "P2", ["s0"])
    path = tmp_path / "m.csv"
    write_metric_rows(path, rep.rows, ["config_hash=abc"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "dataset_id,sample_id,class,dice,hausdorff,hd_sentinel_flag"
    assert lines[2] == "P2,s0,2,1.000000,5.656854,1"
