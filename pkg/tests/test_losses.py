import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpl import autodiff as ad
from scpl.autodiff import finite_diff_check
from scpl.losses import (NoPositivePairsError, build_positive_mask, cross_entropy, supcon_loss,
                         supcon_loss_alg1, supcon_terms)


def brute_force_supcon(z, labels, tau):
    """Plain-Python triple loop over (anchor i, positive p, denominator j)."""
    b = len(labels)
    zn = [row / math.sqrt(sum(v * v for v in row)) for row in z]

    def dot(a, c):
        return sum(x * y for x, y in zip(zn[a], zn[c]))

    total = 0.0
    for i in range(b):
        pos = [p for p in range(b) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        acc = 0.0
        for p in pos:
            denom = math.fsum(math.exp(dot(i, j) / tau) for j in range(b) if j != i)
            acc += math.log(math.exp(dot(i, p) / tau) / denom)
        total += -acc / len(pos)
    return total


def literal_alg1(x, label, temperature):
    """Line-by-line numpy transcription of the reference pseudocode (no stabilization)."""
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    label = label.reshape(-1, 1)
    bsz = label.shape[0]
    mask = (label == label.T).astype(float)
    anchor_mask = np.ones_like(mask)
    anchor_mask[np.arange(bsz), np.arange(bsz)] = 0
    logits = (x @ x.T) / temperature
    deno = np.exp(logits) * anchor_mask
    prob = logits - np.log(deno.sum(1, keepdims=True))
    loss = -(anchor_mask * mask * prob).sum(1) / mask.sum()
    return loss.reshape(1, bsz).mean()


def _batch(rng):
    b = int(rng.integers(2, 17))
    d = int(rng.integers(1, 9))
    labels = rng.integers(0, max(1, b // 2), size=b)
    labels[1] = labels[0]
    return rng.normal(size=(b, d)), labels


def test_mask_examples():
    pm = build_positive_mask([0, 0, 1])
    np.testing.assert_array_equal(pm.mask, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    assert not pm.anchor_mask.diagonal().any()
    assert list(build_positive_mask([2, 2, 2, 2]).sizes()) == [3, 3, 3, 3]
    assert not build_positive_mask([0, 1, 2]).positives.any()


def test_mask_needs_two_samples():
    with pytest.raises(ValueError):
        build_positive_mask([0])


@pytest.mark.parametrize("c", [1.0, 0.3, -0.9])
def test_two_sample_batch_is_zero(c):
    z = np.array([[1.0, 0.0], [c, math.sqrt(1 - c * c)]])
    assert supcon_loss(z, [5, 5], 0.1).item() == 0.0
    assert supcon_loss_alg1(z, [5, 5], 0.1).item() == 0.0


def test_fixed_b4_against_double_loop():
    rng = np.random.default_rng(2024)
    z = rng.normal(size=(4, 3))
    labels = [0, 0, 1, 1]
    assert supcon_loss(z, labels, 0.1).item() == pytest.approx(brute_force_supcon(z, labels, 0.1), abs=1e-10)


def test_matches_brute_force_on_200_batches():
    rng = np.random.default_rng(7)
    for k in range(200):
        z, labels = _batch(rng)
        tau = (0.05, 0.1, 1.0)[k % 3]
        got = supcon_loss(z, labels, tau).item()
        assert got == pytest.approx(brute_force_supcon(z, labels, tau), abs=1e-10, rel=1e-12)


def test_alg1_matches_literal_trace():
    rng = np.random.default_rng(8)
    for k in range(100):
        z, labels = _batch(rng)
        tau = (0.05, 0.1, 1.0)[k % 3]
        assert supcon_loss_alg1(z, labels, tau).item() == pytest.approx(literal_alg1(z, labels, tau), abs=1e-10)


def test_alg1_divisor_includes_diagonal():
    # b=2 with one shared label: mask.sum() is 4 and both logs are log(1) = 0
    assert build_positive_mask([1, 1]).mask.sum() == 4
    assert literal_alg1(np.eye(2)[[0, 0]], np.array([1, 1]), 0.1) == 0.0


def test_alg1_differs_from_per_anchor_form():
    z = np.random.default_rng(0).normal(size=(4, 3))
    labels = [0, 0, 0, 1]
    assert abs(supcon_loss(z, labels).item() - supcon_loss_alg1(z, labels).item()) > 1e-3


def test_anchor_without_positives_is_skipped():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 2))
    terms, has = supcon_terms(z, [0, 0, 1])
    assert list(has) == [True, True, False]
    assert terms.data[2] == 0.0


def test_no_positive_pairs_error():
    with pytest.raises(NoPositivePairsError, match="no positive pairs in batch"):
        supcon_loss(np.eye(3), [0, 1, 2])


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_bad_temperature(tau):
    with pytest.raises(ValueError):
        supcon_loss(np.eye(2), [0, 0], tau)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.01, 100.0))
def test_permutation_and_scale_invariance(seed, alpha):
    rng = np.random.default_rng(seed)
    z, labels = _batch(rng)
    base = supcon_loss(z, labels).item()
    perm = rng.permutation(len(labels))
    assert supcon_loss(z[perm], labels[perm]).item() == pytest.approx(base, abs=1e-12, rel=1e-12)
    assert supcon_loss(alpha * z, labels).item() == pytest.approx(base, abs=1e-12, rel=1e-11)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_anchor_terms_nonnegative(seed):
    rng = np.random.default_rng(seed)
    z, labels = _batch(rng)
    terms, _ = supcon_terms(z, labels)
    if len(labels) >= 3:
        assert np.all(terms.data >= -1e-12)
    else:
        assert np.all(terms.data == 0.0)


def test_stable_for_large_logits():
    # tau = 1e-4 puts dot products at up to 1e4 in magnitude
    z = np.random.default_rng(3).normal(size=(6, 4))
    val = supcon_loss(z, [0, 0, 1, 1, 2, 2], 1e-4).item()
    assert math.isfinite(val)


@pytest.mark.parametrize("fn", [supcon_loss, supcon_loss_alg1])
def test_gradients_over_100_batches(fn):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        z, labels = _batch(rng)
        worst = max(worst, finite_diff_check(lambda t: fn(t, labels, 0.5), z))
    assert worst < 1e-4


def test_cross_entropy_is_summed_and_matches_direct():
    rng = np.random.default_rng(0)
    logits, y = rng.normal(size=(5, 3)), np.array([0, 2, 1, 1, 0])
    want = sum(-logits[i, y[i]] + math.log(sum(math.exp(v) for v in logits[i])) for i in range(5))
    assert cross_entropy(logits, y).item() == pytest.approx(want, abs=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ad.ShapeError):
        cross_entropy(np.zeros((2, 3)), [0])
