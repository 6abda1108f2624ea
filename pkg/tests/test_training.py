import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocnet.errors import ContractError, DataError, NumericError
from ocnet.gradcheck import run_check
from ocnet.tensor import Tensor
from ocnet.training import (
    OhemConfig,
    ScheduleConfig,
    SupervisionConfig,
    class_balanced_ce,
    class_weights_from_labels,
    deep_supervised_loss,
    ohem_select,
    poly_lr,
    sgd_step,
    true_class_probs,
)

from oracles import weighted_nll


def _ohem(probs, theta=0.7, min_kept=1):
    probs = np.asarray(probs, dtype=np.float64).reshape(1, 1, -1)
    labels = np.zeros(probs.shape, np.int64)
    return ohem_select(probs, labels, OhemConfig(theta, min_kept)).ravel()


# -- cross entropy -------------------------------------------------------------


def test_ce_peaked_logits_near_zero(rng):
    labels = rng.integers(0, 3, size=(2, 4, 4))
    logits = np.eye(3)[labels].transpose(0, 3, 1, 2) * 20.0
    assert class_balanced_ce(Tensor(logits), labels).item() < 1e-3


@pytest.mark.parametrize("k", [2, 4, 7])
def test_ce_uniform_logits_is_ln_k(k, rng):
    labels = rng.integers(0, k, size=(1, 3, 5))
    loss = class_balanced_ce(Tensor(np.zeros((1, k, 3, 5))), labels).item()
    assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_ce_two_pixel_weighted_hand_oracle():
    logits = np.array([[0.3, -1.2], [1.0, 0.4]])  # (class, pixel)
    labels = np.array([0, 1])
    weights = [2.0, 1.0]
    got = class_balanced_ce(Tensor(logits.reshape(1, 2, 1, 2)), labels.reshape(1, 1, 2), weights).item()
    expected = (weighted_nll([0.3, 1.0], 0, 2.0) + weighted_nll([-1.2, 0.4], 1, 1.0)) / 2
    assert got == pytest.approx(expected, abs=1e-12)


def test_ce_uniform_weights_equal_plain_ce(rng):
    logits = rng.standard_normal((2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    a = class_balanced_ce(Tensor(logits), labels).item()
    b = class_balanced_ce(Tensor(logits), labels, [1.0] * 4).item()
    assert a == pytest.approx(b, abs=1e-6)


def test_ce_skips_ignore_label(rng):
    logits = rng.standard_normal((1, 3, 2, 2))
    labels = np.array([[[1, 255], [255, 2]]])
    flat = logits[0].reshape(3, -1)
    expected = (weighted_nll(flat[:, 0], 1, 1.0) + weighted_nll(flat[:, 3], 2, 1.0)) / 2
    assert class_balanced_ce(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-12)


def test_ce_rejects_out_of_range_label():
    with pytest.raises(DataError):
        class_balanced_ce(Tensor(np.zeros((1, 3, 1, 2))), np.array([[[0, 3]]]))


def test_ce_all_ignored_is_an_error():
    with pytest.raises(DataError):
        class_balanced_ce(Tensor(np.zeros((1, 3, 1, 2))), np.array([[[255, 255]]]))


def test_ce_gradient():
    report = run_check("ce", seed=2)
    assert report.passed, report.lines()


def test_class_weights_formula():
    labels = np.array([[0, 0, 0, 1], [1, 255, 2, 0]])
    w = class_weights_from_labels([labels], 4)
    freq = np.array([4, 2, 1, 0]) / 7
    np.testing.assert_allclose(w, 1 / np.log(1.02 + freq), rtol=1e-6)
    assert w[3] == max(w)


# -- OHEM ----------------------------------------------------------------------


def test_ohem_all_half_keeps_everything():
    assert _ohem([0.5] * 6).all()


def test_ohem_min_kept_ties_by_index():
    assert _ohem([0.9] * 4, min_kept=2).tolist() == [True, True, False, False]


def test_ohem_mixed_probabilities():
    assert np.flatnonzero(_ohem([0.1, 0.8, 0.6, 0.95])).tolist() == [0, 2]


def test_ohem_fills_up_to_min_kept_by_probability():
    assert np.flatnonzero(_ohem([0.9, 0.75, 0.5, 0.99, 0.8], min_kept=3)).tolist() == [1, 2, 4]


def test_ohem_ignores_unlabelled():
    probs = np.array([[[0.1, 0.2, 0.9]]])
    labels = np.array([[[255, 0, 0]]])
    mask = ohem_select(probs, labels, OhemConfig(0.7, 2))
    assert mask.ravel().tolist() == [False, True, True]


def test_ohem_nothing_labelled():
    with pytest.raises(DataError):
        ohem_select(np.zeros((1, 1, 2)), np.full((1, 1, 2), 255), OhemConfig())


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=40),
    st.floats(0.05, 1.0),
    st.integers(1, 50),
)
def test_ohem_mask_properties(probs, theta, min_kept):
    mask = _ohem(probs, theta, min_kept)
    probs = np.asarray(probs)
    assert mask.sum() >= min(min_kept, probs.size)
    assert (probs[~mask] >= theta).all() or mask.sum() >= min_kept
    # every dropped pixel is at least as easy as every kept one that is above theta
    if (~mask).any() and (mask & (probs >= theta)).any():
        assert probs[~mask].min() >= probs[mask & (probs >= theta)].max()


def test_true_class_probs_matches_softmax():
    logits = np.array([[[[1.0]], [[2.0]], [[3.0]]]])
    p = true_class_probs(logits, np.array([[[2]]]))
    assert p.item() == pytest.approx(0.66524, abs=1e-5)


def test_ohem_config_validation():
    with pytest.raises(ContractError):
        OhemConfig(theta=0.0)
    with pytest.raises(ContractError):
        OhemConfig(min_kept=0)


# -- schedule and optimiser ------------------------------------------------------


def test_poly_lr_endpoints_and_midpoint():
    cfg = ScheduleConfig(base_lr=0.01, max_iter=1000, power=0.9)
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(1000, cfg) == 0.0
    assert poly_lr(500, cfg) == pytest.approx(0.0053589, abs=1e-6)


def test_poly_lr_strictly_decreasing():
    cfg = ScheduleConfig(base_lr=0.02, max_iter=300, power=0.9)
    lrs = [poly_lr(i, cfg) for i in range(301)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_poly_lr_past_end():
    with pytest.raises(ContractError):
        poly_lr(11, ScheduleConfig(max_iter=10))


def test_sgd_plain_descent():
    p, g, v = np.array([1.0, -2.0]), np.array([0.5, 0.5]), np.zeros(2)
    sgd_step([p], [g], [v], lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p, [0.95, -2.05])


def test_sgd_zero_grad_no_change():
    p = np.array([3.0, 4.0])
    sgd_step([p], [np.zeros(2)], [np.zeros(2)], lr=0.5, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p, [3.0, 4.0])


def test_sgd_two_steps_match_unrolled_recurrence():
    p0, g1, g2 = 1.0, 0.3, -0.2
    lr, m, wd = 0.1, 0.9, 0.01
    p, v = np.array([p0]), np.zeros(1)
    sgd_step([p], [np.array([g1])], [v], lr, m, wd)
    sgd_step([p], [np.array([g2])], [v], lr, m, wd)
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    v2 = m * v1 + g2 + wd * p1
    p2 = p1 - lr * v2
    assert p[0] == pytest.approx(p2, abs=1e-15)


def test_sgd_refuses_nan_gradient():
    p = np.array([1.0, 2.0])
    q = np.array([5.0])
    with pytest.raises(NumericError):
        sgd_step([q, p], [np.array([1.0]), np.array([np.nan, 0.0])], [np.zeros(1), np.zeros(2)], 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(q, [5.0])
    np.testing.assert_array_equal(p, [1.0, 2.0])


# -- deep supervision ------------------------------------------------------------


def test_deep_supervision_identical_logits_scale(rng):
    logits = Tensor(rng.standard_normal((2, 4, 3, 3)))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    single = class_balanced_ce(logits, labels).item()
    both = deep_supervised_loss(logits, logits, labels, SupervisionConfig(1.0, 0.4)).item()
    assert both == pytest.approx(1.4 * single, abs=1e-6)


def test_deep_supervision_without_aux(rng):
    main = Tensor(rng.standard_normal((1, 3, 2, 2)))
    labels = rng.integers(0, 3, size=(1, 2, 2))
    loss = deep_supervised_loss(main, Tensor(np.zeros((1, 3, 2, 2))), labels, SupervisionConfig(1.0, 0.0))
    assert loss.item() == class_balanced_ce(main, labels).item()


def test_deep_supervision_distinct_branches(rng):
    main = rng.standard_normal((1, 2, 1, 3))
    aux = rng.standard_normal((1, 2, 1, 3))
    labels = np.array([[[0, 1, 1]]])
    weights = [1.5, 0.5]

    def branch(lg):
        return sum(weighted_nll(lg[0, :, 0, j], labels[0, 0, j], weights[labels[0, 0, j]]) for j in range(3)) / 3

    got = deep_supervised_loss(Tensor(main), Tensor(aux), labels, SupervisionConfig(1.0, 0.4), None, weights)
    assert got.item() == pytest.approx(branch(main) + 0.4 * branch(aux), abs=1e-12)


def test_ohem_masks_only_main_branch():
    main = np.zeros((1, 2, 1, 4))
    main[0, 0, 0, :2] = 5.0  # confident and correct on the first two pixels
    labels = np.zeros((1, 1, 4), np.int64)
    aux = np.zeros((1, 2, 1, 4))
    got = deep_supervised_loss(
        Tensor(main), Tensor(aux), labels, SupervisionConfig(1.0, 1.0), OhemConfig(0.7, 1)
    ).item()
    # main: only the two uncertain pixels, each ln 2; aux: all four, each ln 2
    assert got == pytest.approx(2 * math.log(2), abs=1e-12)
