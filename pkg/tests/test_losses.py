import math

import numpy as np
import pytest

from mmfedsim.nn import cross_entropy_loss, kd_loss, mean_entropy, moon_contrastive_loss, supcon_loss
from mmfedsim.nn.losses import kd_loss_grad

from oracles import kd_scalar, kl_scalar, moon_scalar, softmax_row, supcon_double_loop


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------- cross-entropy


def test_ce_uniform_logits():
    assert cross_entropy_loss(np.zeros((5, 4)), np.arange(5) % 4) == pytest.approx(math.log(4), abs=1e-12)


def test_ce_confident_limit():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1e6
    assert cross_entropy_loss(logits, np.array([1, 2])) == pytest.approx(0.0, abs=1e-12)


def test_ce_two_class_hand_value():
    # -log sigmoid(1) = softplus(-1)
    expected = math.log1p(math.exp(-1.0))
    assert expected == pytest.approx(0.3133, abs=5e-5)
    assert cross_entropy_loss(np.array([[1.0, 2.0]]), np.array([1])) == pytest.approx(expected, abs=1e-15)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((1, 3)), np.array([3]))


# ---------------------------------------------------------------- supcon


def test_supcon_two_identical_rows():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert supcon_loss(z, np.array([0, 0]), 1.0) == pytest.approx(0.0, abs=1e-15)


def test_supcon_all_distinct_labels_is_zero():
    z = unit_rows(np.random.default_rng(0), 5, 3)
    assert supcon_loss(z, np.arange(5), 0.1) == 0.0


def test_supcon_fixed_four_rows():
    z = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.8, 0.6]])
    labels = np.array([0, 0, 1, 1])
    assert abs(supcon_loss(z, labels, 0.07) - supcon_double_loop(z, labels, 0.07)) < 1e-9


def test_supcon_matches_double_loop_100_batches():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        tau = float(rng.uniform(0.05, 1.0))
        z = unit_rows(rng, n, int(rng.integers(2, 6)))
        labels = rng.integers(0, 3, size=n)
        worst = max(worst, abs(supcon_loss(z, labels, tau) - supcon_double_loop(z, labels, tau)))
    assert worst < 1e-9


def test_supcon_rejects_bad_temperature():
    with pytest.raises(ValueError):
        supcon_loss(np.eye(2), np.array([0, 0]), 0.0)


# ---------------------------------------------------------------- distillation


def test_kd_identical_is_zero():
    a = np.random.default_rng(1).normal(size=(4, 5))
    for tau in (0.5, 1.0, 3.0):
        assert abs(kd_loss(a, a, tau)) <= 1e-12


def test_kd_uniform_pair_is_zero():
    assert kd_loss(np.zeros((2, 3)), np.full((2, 3), 7.0), 2.0) == pytest.approx(0.0, abs=1e-15)


def test_kd_hand_value():
    p = softmax_row([2.0, 0.0])
    expected = kl_scalar(p, [0.5, 0.5])
    got = kd_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]), 1.0)
    assert abs(got - expected) < 1e-9


def test_kd_matches_scalar_oracle_with_temperature():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t, s = rng.normal(size=(2, 3, 4)) * 3
        tau = float(rng.uniform(0.5, 4.0))
        assert abs(kd_loss(t, s, tau) - kd_scalar(t.tolist(), s.tolist(), tau)) < 1e-9


def test_kd_literal_form():
    t = np.array([[2.0, 0.0, -1.0]])
    s = np.array([[0.0, 1.0, 0.0]])
    expected = 2.0 * kl_scalar(softmax_row(t[0]), softmax_row(s[0]))
    assert kd_loss(t, s, 2.0, form="literal") == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        kd_loss_grad(t, s, 2.0, form="other")


# ---------------------------------------------------------------- model-contrastive


def test_moon_symmetric_case_is_ln2():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 4))
    ref = rng.normal(size=(3, 4))
    assert moon_contrastive_loss(z, ref, ref, 0.5) == pytest.approx(math.log(2), abs=1e-12)


def test_moon_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    z, zg, zp = rng.normal(size=(3, 2, 5))
    assert abs(moon_contrastive_loss(z, zg, zp, 0.5) - moon_scalar(z, zg, zp, 0.5)) < 1e-12


# ---------------------------------------------------------------- entropy


@pytest.mark.parametrize("c", [2, 3, 4, 10])
def test_uniform_entropy_is_log_c(c):
    assert abs(mean_entropy(np.zeros((3, c))) - math.log(c)) < 1e-9
