"""Tests for the reference Adam / AdaBelief steppers and their agreement with AB-FGSM"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from attacks import AttackConfig, attack_abfgsm, belief_moment_update
from models import FunctionOracle, LabeledExample
from optim_ref import (OptimizerError, OptimizerParams, OptimizerState, OptimizerVariant, run_descent,
                       step, step_adabelief, step_adam, with_variant)


def test_adam_first_step_is_signed_lr():
    params = OptimizerParams(lr=0.01, variant="adam")
    g = np.array([0.5, -2.0, 1e-3])
    state = step_adam(OptimizerState.initial(np.zeros(3)), g, params)
    assert state.t == 1
    assert np.allclose(state.m_hat, g)
    assert np.allclose(state.second_hat, g ** 2)
    assert np.allclose(state.delta_theta, 0.01 * g / (np.abs(g) + 1e-8))


def test_adabelief_first_step():
    params = OptimizerParams(lr=0.01)
    g = np.array([1.0, -4.0])
    state = step_adabelief(OptimizerState.initial(np.zeros(2)), g, params)
    # s_1 = (1 - b2) (b1 g)^2, so s_hat_1 = b1^2 g^2 + eps / (1 - b2)
    expected_s_hat = 0.81 * g ** 2 + 1e-8 / 0.001
    assert np.allclose(state.second_hat, expected_s_hat)
    assert np.allclose(state.delta_theta, 0.01 * g / (np.sqrt(expected_s_hat) + 1e-8))


def test_belief_steps_exceed_adam_on_constant_gradient():
    """A steady gradient matches its own EMA, so the belief term shrinks and the step grows"""
    adam = OptimizerParams(lr=0.01, variant=OptimizerVariant.ADAM)
    belief = with_variant(adam, OptimizerVariant.ADABELIEF)
    a = b = OptimizerState.initial(np.zeros(2))
    g = np.array([1.0, -0.5])
    for _ in range(50):
        a = step(a, g, adam)
        b = step(b, g, belief)
        assert np.all(np.abs(b.delta_theta) >= np.abs(a.delta_theta)), f"t={b.t}"


def test_alternating_gradient_second_moment_bounded():
    params = OptimizerParams(lr=0.01, amsgrad=True)
    state = OptimizerState.initial(np.zeros(1))
    for t in range(1, 201):
        state = step(state, np.array([1.0 if t % 2 else -1.0]), params)
        assert 0.0 <= state.second[0] <= 4.0
    assert state.second_hat[0] > 0


def test_alternating_gradient_keeps_belief_term_alive():
    params = OptimizerParams(lr=0.01)
    state = OptimizerState.initial(np.zeros(1))
    for t in range(1, 11):
        state = step_adabelief(state, np.array([1.0 if t % 2 else -1.0]), params)
    assert state.second[0] > 0.1 * (1 - params.beta2), state.second


def test_zero_gradient_never_moves():
    for variant in OptimizerVariant:
        params = OptimizerParams(lr=0.1, variant=variant)
        state = OptimizerState.initial(np.array([0.7, -1.3]))
        for _ in range(25):
            state = step(state, np.zeros(2), params)
            assert np.array_equal(state.theta, [0.7, -1.3]), variant.value
            assert np.array_equal(state.delta_theta, [0.0, 0.0])


def _scalar_descent(belief: bool, steps: int = 20, lr: float = 0.1):
    """theta^2 from theta = 1 with plain floats"""
    b1, b2, eps = 0.9, 0.999, 1e-8
    theta, m, s = 1.0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * ((g - m) ** 2 if belief else g ** 2)
        m_hat = m / (1 - b1 ** t)
        s_hat = (s + eps) / (1 - b2 ** t) if belief else s / (1 - b2 ** t)
        theta -= lr * m_hat / (math.sqrt(s_hat) + eps)
        path.append(theta)
    return path


def test_scalar_quadratic_traces():
    for variant, belief in ((OptimizerVariant.ADAM, False), (OptimizerVariant.ADABELIEF, True)):
        trajectory = run_descent("quadratic", OptimizerParams(lr=0.1, variant=variant), 20, [1.0])
        expected = _scalar_descent(belief)
        for point, theta in zip(trajectory.points[1:], expected):
            assert abs(point.theta[0] - theta) <= 1e-12, f"{variant.value} t={point.t}"


def test_constant_gradient_first_moment_is_exact():
    params = OptimizerParams(lr=0.01)
    state = OptimizerState.initial(np.zeros(1))
    for _ in range(30):
        state = step(state, np.array([0.75]), params)
        assert state.m_hat[0] == pytest.approx(0.75, rel=1e-12)


def test_attack_moments_match_reference_optimizer():
    """belief_moment_update and the AdaBelief reference agree step for step"""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = OptimizerParams(lr=1.0, beta1=0.99, beta2=0.999, stabilizer=1e-14, amsgrad=True)
        state = OptimizerState.initial(np.zeros(5))
        m, s = np.zeros(5), np.zeros(5)
        for t in range(1, 51):
            g = rng.normal(size=5) * rng.uniform(0.01, 10.0)
            m, s, m_hat, s_hat = belief_moment_update(m, s, g, t, 0.99, 0.999, 1e-14, amsgrad=True)
            state = step_adabelief(state, g, params)
            assert np.allclose(state.m, m, rtol=1e-12, atol=0), f"seed {seed} t={t}"
            assert np.allclose(state.second, s, rtol=1e-12, atol=0)
            assert np.allclose(state.m_hat, m_hat, rtol=1e-12, atol=0)
            assert np.allclose(state.second_hat, s_hat, rtol=1e-12, atol=0)


def test_abfgsm_directions_match_reference_steps():
    """Replaying the attack's gradients through AdaBelief reproduces its directions"""
    oracle = FunctionOracle(lambda x: float(np.sum(np.sin(3 * x))), lambda x: 3 * np.cos(3 * x), (4,))
    cfg = AttackConfig(eps_ball=0.2, steps=10, record_trace=True)
    result = attack_abfgsm(oracle, LabeledExample(np.array([0.1, 0.3, 0.6, 0.9]), 0), cfg)
    params = OptimizerParams(lr=1.0, beta1=cfg.beta1, beta2=cfg.beta2, stabilizer=cfg.stabilizer_delta,
                             amsgrad=cfg.amsgrad)
    state = OptimizerState.initial(np.zeros(4))
    for record in result.trace:
        state = step_adabelief(state, record.gradient, params)
        assert np.allclose(state.m, record.m, rtol=1e-12)
        assert np.array_equal(np.sign(state.delta_theta), record.direction), f"t={record.t}"


def test_quadratic_descent_converges():
    for variant in ("adam", "adabelief"):
        trajectory = run_descent("quadratic", OptimizerParams(lr=0.05, variant=variant), 300, [1.0, -2.0])
        assert len(trajectory.points) == 301
        assert trajectory.points[0].t == 0 and trajectory.points[0].loss == pytest.approx(5.0)
        best = min(p.loss for p in trajectory.points)
        assert best < 0.05 * trajectory.points[0].loss, f"{variant}: best loss {best}"
        assert trajectory.final.loss < trajectory.points[0].loss

        settled = run_descent("quadratic", OptimizerParams(lr=0.1, variant=variant), 200, [1.0])
        assert abs(settled.final.theta[0]) < 1e-3, f"{variant}: theta {settled.final.theta}"


def test_descent_rejects_bad_setups():
    with pytest.raises(OptimizerError):
        run_descent("rosenbrock", OptimizerParams(), 5, [1.0])
    with pytest.raises(OptimizerError):
        run_descent("himmelblau", OptimizerParams(), 5, [1.0, 1.0])
    with pytest.raises(OptimizerError):
        OptimizerParams(beta2=1.0)
    with pytest.raises(OptimizerError):
        OptimizerParams(variant="rmsprop")
    with pytest.raises(OptimizerError):
        step(OptimizerState.initial(np.zeros(2)), np.array([np.nan, 0.0]), OptimizerParams())


def test_trajectory_csv(tmp_path):
    trajectory = run_descent("rosenbrock", OptimizerParams(lr=0.01), 10, [-1.0, 1.5])
    path = trajectory.to_csv(tmp_path / "traj.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    assert lines[1] == "t,theta_0,theta_1,loss"
    assert len(lines) == 2 + 11
