"""Tests for the tensor primitives and the invariant guard"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from invariants import DOMAIN_BOUND, LINF_BOUND, InvariantGuard, InvariantViolation
from tensor_core import (TensorError, add, as_tensor, clip_ball, div, l1_norm, l1_normalized,
                         linf_norm, sign, sqrt)


def test_sign_maps_zero_to_zero():
    assert np.array_equal(sign(np.array([-2.5, 0.0, 3.0])), np.array([-1.0, 0.0, 1.0]))


def test_clip_ball_intersects_ball_and_domain():
    x = np.array([0.5, 0.95, 0.02])
    x_adv = np.array([0.9, 1.2, -1.0])
    clipped = clip_ball(x_adv, x, 0.1, 0.0, 1.0)
    assert np.allclose(clipped, [0.6, 1.0, 0.0]), clipped
    assert np.array_equal(clip_ball(clipped, x, 0.1, 0.0, 1.0), clipped), "clip_ball is not idempotent"
    assert linf_norm(clipped - x) <= 0.1 + 1e-12


def test_clip_ball_zero_radius_returns_original():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=10)
    assert np.array_equal(clip_ball(x + rng.normal(size=10), x, 0.0, 0.0, 1.0), x)


def test_clip_ball_rejects_bad_arguments():
    x = np.zeros(3)
    with pytest.raises(TensorError):
        clip_ball(np.zeros(4), x, 0.1, 0.0, 1.0)
    with pytest.raises(TensorError):
        clip_ball(x, x, -0.1, 0.0, 1.0)
    with pytest.raises(TensorError):
        clip_ball(x, x, 0.1, 1.0, 0.0)


def test_l1_normalized():
    t = np.array([1.0, -3.0, 0.0, 4.0])
    assert l1_norm(l1_normalized(t)) == pytest.approx(1.0)
    assert np.array_equal(l1_normalized(np.zeros(5)), np.zeros(5)), "all-zero input must stay zero"


def test_arithmetic_errors():
    with pytest.raises(TensorError):
        add(np.zeros(2), np.zeros(3))
    with pytest.raises(TensorError):
        sqrt(np.array([1.0, -1e-9]))
    with pytest.raises(TensorError):
        div(np.ones(2), np.array([1.0, 0.0]))
    assert np.allclose(div(np.ones(2), np.zeros(2), stabilizer=0.5), [2.0, 2.0])


def test_as_tensor_shapes():
    assert as_tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(TensorError):
        as_tensor([1, 2, 3], (2, 2))
    with pytest.raises(TensorError):
        as_tensor([], (0,))


def test_guard_names_the_broken_invariant():
    guard = InvariantGuard()
    x = np.full(4, 0.5)
    guard.enforce_iterate(x + 0.1, x, 0.1, 0.0, 1.0, np.zeros(4))
    assert guard.violation_count == 0

    with pytest.raises(InvariantViolation) as info:
        guard.enforce_iterate(x + 0.2, x, 0.1, 0.0, 1.0)
    assert info.value.name == LINF_BOUND

    with pytest.raises(InvariantViolation) as info:
        guard.enforce_iterate(np.full(4, 1.05), np.full(4, 1.0), 0.1, 0.0, 1.0)
    assert info.value.name == DOMAIN_BOUND
    assert guard.violations == {LINF_BOUND: 1, DOMAIN_BOUND: 1}
    print(f"[OK] {guard.checks} checks, {guard.violation_count} violations")
