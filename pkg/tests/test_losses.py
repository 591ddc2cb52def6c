"""Loss and metric tests: hand-computed values, exact identities, and
finite-difference gradients."""

import math

import numpy as np
import pytest

from seglab import autodiff as ad
from seglab.losses import (
    LossConfig,
    UncertaintyWeights,
    cross_entropy_loss,
    dice_loss,
    dsc_metric,
    focal_loss,
    mse_metric,
    one_hot,
    uncertainty_aware_loss,
)

rng = np.random.default_rng(11)


def probs_for(labels, classes=4, correct=0.94):
    """Probability map concentrated on the true class at every pixel."""
    hot = one_hot(labels, classes)
    rest = (1.0 - correct) / (classes - 1)
    return hot * (correct - rest) + rest


def random_probs(shape_hw, classes=4, seed=0):
    r = np.random.default_rng(seed)
    raw = r.uniform(0.1, 1.0, (classes,) + shape_hw)
    return raw / raw.sum(axis=0, keepdims=True)


def test_dice_perfect_prediction_is_zero():
    labels = rng.integers(0, 4, (8, 8))
    p = one_hot(labels, 4)
    g = ad.Graph()
    loss = dice_loss(g.leaf(p), labels)
    assert abs(loss.item()) < 1e-9


def test_dice_zero_overlap_is_one():
    labels = np.zeros((6, 6), dtype=int)
    labels[1:3, 1:3] = 1
    labels[3:5, 3:5] = 2
    labels[0, 4:6] = 3
    p = one_hot((labels + 1) % 4, 4)  # every pixel assigned to the wrong class
    g = ad.Graph()
    loss = dice_loss(g.leaf(p), labels)
    assert abs(loss.item() - 1.0) < 1e-6


def test_dice_hand_value_single_foreground_class():
    # two pixels, foreground probability 0.5 each, one true foreground pixel
    labels = np.array([[1, 0]])
    p = np.full((2, 1, 2), 0.5)
    g = ad.Graph()
    loss = dice_loss(g.leaf(p), labels)
    assert abs(loss.item() - 0.5) < 1e-6


def test_dice_pooled_mode_matches_manual():
    labels = rng.integers(0, 4, (10, 10))
    p = random_probs((10, 10), seed=3)
    cfg = LossConfig(dice_per_class=False)
    g = ad.Graph()
    loss = dice_loss(g.leaf(p), labels, cfg)
    hot = one_hot(labels, 4)
    inter = (p * hot)[1:].sum()
    sums = p[1:].sum() + hot[1:].sum()
    expected = 1.0 - (2 * inter + 1e-6) / (sums + 1e-6)
    assert abs(loss.item() - expected) < 1e-12


def test_dice_batched_pools_over_batch():
    labels = rng.integers(0, 4, (3, 8, 8))
    p = np.stack([random_probs((8, 8), seed=i) for i in range(3)])
    g = ad.Graph()
    batched = dice_loss(g.leaf(p), labels).item()
    hot = one_hot(labels, 4)
    inter = (p * hot).sum(axis=(0, 2, 3))[1:]
    sums = p.sum(axis=(0, 2, 3))[1:] + hot.sum(axis=(0, 2, 3))[1:]
    expected = 1.0 - np.mean((2 * inter + 1e-6) / (sums + 1e-6))
    assert abs(batched - expected) < 1e-12


def test_cross_entropy_perfect_is_zero():
    labels = rng.integers(0, 4, (5, 5))
    g = ad.Graph()
    loss = cross_entropy_loss(g.leaf(one_hot(labels, 4)), labels)
    assert loss.item() == 0.0


def test_cross_entropy_hand_values():
    g = ad.Graph()
    one_pixel = np.array([[[0.5]], [[0.5]]])
    assert abs(cross_entropy_loss(g.leaf(one_pixel), np.array([[0]])).item()
               - 0.6931471805599453) < 1e-5
    p2 = np.array([[[0.25]], [[0.75]]])
    assert abs(cross_entropy_loss(g.leaf(p2), np.array([[1]])).item()
               - 0.2876820724517809) < 1e-5


def test_focal_gamma_zero_equals_cross_entropy_exactly():
    labels = rng.integers(0, 4, (12, 9))
    p = random_probs((12, 9), seed=5)
    g = ad.Graph()
    assert focal_loss(g.leaf(p), labels, 0.0).item() == cross_entropy_loss(g.leaf(p), labels).item()


def test_focal_perfect_is_zero_and_hand_value():
    labels = np.array([[0]])
    g = ad.Graph()
    assert focal_loss(g.leaf(one_hot(labels, 2)), labels, 2.0).item() == 0.0
    one_pixel = np.array([[[0.5]], [[0.5]]])
    assert abs(focal_loss(g.leaf(one_pixel), labels, 2.0).item()
               - 0.25 * 0.6931471805599453) < 1e-5


def test_focal_rejects_negative_gamma():
    g = ad.Graph()
    with pytest.raises(ValueError):
        focal_loss(g.leaf(np.full((2, 1, 1), 0.5)), np.array([[0]]), -1.0)


def ua_value(component_values, sigmas):
    g = ad.Graph()
    log_var = g.leaf(np.log(np.square(sigmas)), requires_grad=True)
    comps = [g.constant(v) for v in component_values]
    return uncertainty_aware_loss(comps, UncertaintyWeights(log_var=log_var)), g, log_var


def test_ua_hand_values():
    loss, _, _ = ua_value([0.0], np.array([1.0]))
    assert abs(loss.item() - math.log(2.0)) < 1e-5
    loss3, _, _ = ua_value([1.0, 1.0, 1.0], np.array([1.0, 1.0, 1.0]))
    assert abs(loss3.item() - 3.0 * (0.5 + math.log(2.0))) < 1e-5
    assert abs(loss3.item() - 3.57944) < 1e-5


def test_ua_stationary_at_sigma_one_with_unit_loss():
    loss, g, log_var = ua_value([1.0], np.array([1.0]))
    grads = g.backward(loss)
    assert grads[log_var.node_id][0] == 0.0


def test_ua_frozen_sigma_equals_half_sum_plus_log2():
    values = [0.37, 1.42, 0.05]
    loss, _, _ = ua_value(values, np.ones(3))
    expected = 0.5 * sum(values) + 3.0 * math.log(2.0)
    assert abs(loss.item() - expected) < 1e-12


def test_ua_component_count_mismatch():
    g = ad.Graph()
    log_var = g.leaf(np.zeros(2), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        uncertainty_aware_loss([g.constant(1.0)], UncertaintyWeights(log_var=log_var))


def test_ua_descent_on_log_var_reaches_stationary_point():
    fixed = np.array([0.8, 2.0, 0.1])
    u = np.zeros(3)
    for _ in range(8000):
        g = ad.Graph()
        log_var = g.leaf(u, requires_grad=True)
        comps = [g.constant(v) for v in fixed]
        loss = uncertainty_aware_loss(comps, UncertaintyWeights(log_var=log_var))
        grad = g.backward(loss)[log_var.node_id]
        u = u - 0.05 * grad
    assert np.abs(grad).max() < 1e-8


def test_loss_gradients_against_finite_differences():
    labels = rng.integers(0, 4, (6, 6))
    p = np.clip(random_probs((6, 6), seed=8), 0.1, 0.9)
    assert ad.grad_check(lambda t: dice_loss(t, labels), p) < 1e-4
    assert ad.grad_check(lambda t: cross_entropy_loss(t, labels), p) < 1e-4
    assert ad.grad_check(lambda t: focal_loss(t, labels, 2.0), p) < 1e-4
    assert ad.grad_check(
        lambda t: uncertainty_aware_loss(
            [t.graph.constant(0.5), t.graph.constant(1.5)], UncertaintyWeights(log_var=t)
        ),
        np.array([0.3, -0.2]),
    ) < 1e-4


def test_losses_nonnegative_and_zero_iff_correct():
    labels = rng.integers(0, 4, (7, 7))
    p = random_probs((7, 7), seed=9)
    g = ad.Graph()
    assert dice_loss(g.leaf(p), labels).item() > 0
    assert cross_entropy_loss(g.leaf(p), labels).item() > 0
    assert focal_loss(g.leaf(p), labels, 2.0).item() > 0
    exact = one_hot(labels, 4)
    assert dice_loss(g.leaf(exact), labels).item() < 1e-9
    assert cross_entropy_loss(g.leaf(exact), labels).item() == 0.0
    assert focal_loss(g.leaf(exact), labels, 2.0).item() == 0.0


def test_loss_shape_validation():
    g = ad.Graph()
    p = g.leaf(random_probs((4, 4)))
    with pytest.raises(ad.ShapeError):
        dice_loss(p, np.zeros((5, 5), dtype=int))
    with pytest.raises(ValueError):
        cross_entropy_loss(p, np.full((4, 4), 7))


def test_dsc_metric_cases():
    a = np.zeros((4, 4), dtype=int)
    a[:2, :2] = 1
    assert dsc_metric(a, a, 1) == 1.0
    b = np.zeros((4, 4), dtype=int)
    b[2:, 2:] = 1
    assert dsc_metric(a, b, 1) == 0.0
    # |P| = |G| = 4 with overlap 2
    c = np.zeros((4, 4), dtype=int)
    c[0, :2] = 1
    c[1, 2:] = 1
    d = np.zeros((4, 4), dtype=int)
    d[0, :2] = 1
    d[2, :2] = 1
    assert dsc_metric(c, d, 1) == 0.5
    assert dsc_metric(a, b, 3) == 1.0  # class absent from both masks


def test_dsc_metric_symmetry():
    for seed in range(5):
        r = np.random.default_rng(seed)
        a = r.integers(0, 4, (8, 8))
        b = r.integers(0, 4, (8, 8))
        for cid in range(4):
            assert dsc_metric(a, b, cid) == dsc_metric(b, a, cid)


def test_mse_metric_cases():
    labels = rng.integers(0, 4, (6, 6))
    assert mse_metric([one_hot(labels, 4)], [labels]) == 0.0
    two_class = np.full((2, 3, 3), 0.5)
    g2 = rng.integers(0, 2, (3, 3))
    assert abs(mse_metric([two_class], [g2]) - 0.25) < 1e-12
    p = random_probs((6, 6), seed=4)
    single = mse_metric([p], [labels])
    doubled = mse_metric([p, p], [labels, labels])
    assert abs(single - doubled) < 1e-15
    with pytest.raises(ValueError):
        mse_metric([], [])
