import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cellmamba.autodiff import Tensor, default_dtype
from cellmamba.boxes import iou
from cellmamba.losses import (
    IGNORE,
    NEGATIVE,
    Assignment,
    LossConfig,
    NumericError,
    SmoothL1,
    assign_targets,
    focal_loss,
    smooth_l1,
    total_loss,
)


def logit(p):
    return np.log(p / (1 - p))


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def scalar(v):
    return Tensor(np.asarray(v, dtype=np.float64))


# --- config -----------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"focal_alpha": 0.0}, {"focal_alpha": 1.0}, {"focal_gamma": -1.0}, {"neg_iou": 0.6}])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)


# --- assignment --------------------------------------------------------------------------


def test_identical_and_disjoint_anchor():
    anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
    a = assign_targets(anchors, np.array([[0, 0, 10, 10]]), np.array([2]), LossConfig())
    assert a.labels.tolist() == [2, NEGATIVE] and a.matched.tolist() == [0, -1]


def test_force_match_at_045():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    best = [0.0, 0.0, 10.0, 10 / 0.45]
    anchors = np.array([best, [0, 0, 10, 40.0], [100, 100, 110, 110]])
    ious = [iou(a, gt[0]) for a in anchors]  # exhaustive IoU oracle
    assert ious[0] == pytest.approx(0.45) and int(np.argmax(ious)) == 0
    a = assign_targets(anchors, gt, np.array([1]), LossConfig())
    assert a.labels.tolist() == [1, NEGATIVE, NEGATIVE] and a.matched[0] == 0


def test_ignore_band_and_empty_gts():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 10 / 0.45]])
    assert assign_targets(anchors, gt, np.array([0]), LossConfig()).labels.tolist() == [0, IGNORE]
    empty = assign_targets(anchors, np.zeros((0, 4)), np.zeros(0, int), LossConfig())
    assert np.all(empty.labels == NEGATIVE) and empty.num_positive == 0


def _random_boxes(rng, n, span=64.0):
    xy = rng.uniform(0, span, (n, 2))
    return np.column_stack([xy, xy + rng.uniform(4, 24, (n, 2))])


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_assignment_permutation_invariant(seed, m):
    rng = np.random.default_rng(seed)
    anchors, gts = _random_boxes(rng, 40), _random_boxes(rng, m)
    labels = rng.integers(0, 3, m)
    perm = rng.permutation(m)
    a = assign_targets(anchors, gts, labels, LossConfig())
    b = assign_targets(anchors, gts[perm], labels[perm], LossConfig())
    np.testing.assert_array_equal(a.labels, b.labels)
    pos = a.positive
    np.testing.assert_array_equal(a.matched[pos], perm[b.matched[pos]])


@given(st.integers(0, 10_000))
def test_every_gt_gets_a_positive(seed):
    rng = np.random.default_rng(seed)
    anchors, gts = _random_boxes(rng, 60, 40), _random_boxes(rng, 3, 40)
    a = assign_targets(anchors, gts, np.arange(3), LossConfig())
    overlaps = [max(iou(an, g) for an in anchors) for g in gts]
    assume(all(o > 0 for o in overlaps))
    assert set(a.matched[a.positive]) == {0, 1, 2}
    assert np.all(a.matched[~a.positive] == -1)


# --- focal -------------------------------------------------------------------------------


def _single(label, p, cfg=LossConfig()):
    asg = Assignment(np.array([label]), np.array([0 if label >= 0 else -1]))
    return float(focal_loss(scalar([[logit(p)]]), asg, cfg).data)


def test_focal_scalar_reference():
    assert _single(0, 0.9) == pytest.approx(0.25 * 0.1**2 * -np.log(0.9), rel=1e-9)
    assert _single(0, 0.9) == pytest.approx(2.634e-4, rel=1e-3)


def test_focal_confident_limit():
    assert _single(0, 1 - 1e-9) < 1e-15
    assert _single(NEGATIVE, 1e-9) < 1e-15


def test_focal_gamma0_alpha_half_is_half_bce(rng):
    cfg = LossConfig(focal_alpha=0.5, focal_gamma=0.0)
    z = rng.standard_normal((6, 3))
    labels = np.array([0, 2, NEGATIVE, 1, NEGATIVE, NEGATIVE])
    asg = Assignment(labels, np.where(labels >= 0, 0, -1))
    y = np.zeros((6, 3))
    y[[0, 1, 3], [0, 2, 1]] = 1
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum() / 3
    assert float(focal_loss(scalar(z), asg, cfg).data) == pytest.approx(0.5 * bce, rel=1e-10)


def test_focal_ignores_ignored_and_normalises_by_positives(rng):
    z = rng.standard_normal((4, 2))
    base = Assignment(np.array([0, NEGATIVE, NEGATIVE, NEGATIVE]), np.array([0, -1, -1, -1]))
    ignored = Assignment(np.array([0, NEGATIVE, IGNORE, NEGATIVE]), np.array([0, -1, -1, -1]))
    z2 = z.copy()
    z2[2] += 100
    assert float(focal_loss(scalar(z), ignored, LossConfig()).data) == float(focal_loss(scalar(z2), ignored, LossConfig()).data)
    assert float(focal_loss(scalar(z), ignored, LossConfig()).data) < float(focal_loss(scalar(z), base, LossConfig()).data)
    negatives_only = Assignment(np.full(4, NEGATIVE), np.full(4, -1))
    p = 1 / (1 + np.exp(-z))
    expected = (-(0.75) * p**2 * np.log(1 - p)).sum()
    assert float(focal_loss(scalar(z), negatives_only, LossConfig()).data) == pytest.approx(expected, rel=1e-10)


@given(st.floats(-8, 8), st.floats(0.01, 4), st.sampled_from([0.0, 1.0, 2.0, 3.5]))
def test_focal_positive_term_decreases_as_gap_closes(z, dz, gamma):
    cfg = LossConfig(focal_gamma=gamma)
    lo, hi = _single(0, 1 / (1 + np.exp(-z)), cfg), _single(0, 1 / (1 + np.exp(-(z + dz))), cfg)
    assert 0 <= hi < lo


# --- smooth L1 -----------------------------------------------------------------------------


@pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_scalar(x, expected):
    assert float(SmoothL1.apply(scalar(x)).data) == expected


def test_smooth_l1_differentiable_at_one():
    with default_dtype(np.float64):
        f = lambda v: float(SmoothL1.apply(scalar(v)).data)  # noqa: E731
        h = 1e-7
        left = (f(1.0) - f(1.0 - h)) / h
        right = (f(1.0 + h) - f(1.0)) / h
        assert abs(left - 1) < 1e-6 and abs(right - 1) < 1e-6
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        SmoothL1.apply(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, -1.0])


def test_smooth_l1_positives_only():
    deltas = scalar([[0.5, 0, 0, 0], [9, 9, 9, 9], [2.0, 0, 0, 0]])
    targets = np.zeros((3, 4))
    asg = Assignment(np.array([0, NEGATIVE, 1]), np.array([0, -1, 1]))
    assert float(smooth_l1(deltas, targets, asg).data) == pytest.approx((0.125 + 1.5) / 2)
    none = Assignment(np.full(3, NEGATIVE), np.full(3, -1))
    assert float(smooth_l1(deltas, targets, none).data) == 0.0


# --- total -----------------------------------------------------------------------------------


@pytest.mark.parametrize("cls,box,lam,expected", [(1.0, 2.0, 1.0, 3.0), (1.0, 2.0, 0.0, 1.0), (0.5, 0.25, 2.0, 1.0)])
def test_total_loss_examples(cls, box, lam, expected):
    assert float(total_loss(scalar(cls), scalar(box), LossConfig(box_weight=lam)).data) == expected


def test_total_loss_rejects_nan():
    with pytest.raises(NumericError, match="box"):
        total_loss(scalar(1.0), scalar(np.nan), LossConfig())
    with pytest.raises(NumericError, match="classification"):
        total_loss(scalar(np.inf), scalar(0.0), LossConfig())
