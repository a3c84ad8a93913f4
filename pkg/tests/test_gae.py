import numpy as np
import pytest

from seqcritic.gae import (
    BadInterval,
    GaeConfig,
    LengthMismatch,
    ValueTrace,
    critic_loss,
    gae_targets,
    noisy_label,
    supervised_steps,
    td_residuals,
)

from conftest import brute_gae_targets


def trace(values, steps=None, detached=True):
    values = np.asarray(values, dtype=np.float64)
    if steps is None:
        steps = np.arange(1, len(values) + 1)
    return ValueTrace(steps=steps, values=values, detached=detached)


def test_supervised_steps_paper_grid():
    assert supervised_steps(288, 32).tolist() == [32, 64, 96, 128, 160, 192, 224, 256, 288]


def test_supervised_steps_terminal_only():
    assert supervised_steps(64, 64).tolist() == [64]


def test_supervised_steps_default_grid():
    steps = supervised_steps(64, 8)
    assert len(steps) == 8 and steps[-1] == 64


def test_supervised_steps_bad_interval():
    with pytest.raises(BadInterval):
        supervised_steps(64, 7)


def test_td_residuals_worked_example():
    delta = td_residuals(trace([0.5, 0.2, 0.1]), 1.0, 0.9)
    assert np.allclose(delta, [-0.32, -0.11, 0.9], atol=1e-12)


def test_td_residuals_zero_values():
    delta = td_residuals(trace([0.0] * 5), 1.0, 0.9)
    assert np.array_equal(delta, [0, 0, 0, 0, 1.0])


def test_td_residuals_single_step():
    assert td_residuals(trace([0.7]), 3.0, 0.5).tolist() == [3.0 - 0.7]


def test_gae_targets_worked_triple():
    cfg = GaeConfig(gamma=0.9, lam=0.8, interval=1)
    got = gae_targets(trace([0.5, 0.2, 0.1]), 1.0, cfg).targets
    want = brute_gae_targets([0.5, 0.2, 0.1], 1.0, 0.9, 0.8)
    assert np.allclose(got, [0.56736, 0.738, 1.0], atol=1e-12)
    assert np.allclose(want, [0.56736, 0.738, 1.0], atol=1e-12)


def test_gae_recursion_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = int(rng.integers(1, 65))
        values = rng.uniform(-5, 5, m)
        gamma, lam = rng.uniform(0, 1), rng.uniform(0, 1)
        reward = float(rng.uniform(0, 100))
        got = gae_targets(trace(values), reward, GaeConfig(gamma=gamma, lam=lam, interval=1)).targets
        assert np.max(np.abs(got - brute_gae_targets(values, reward, gamma, lam))) < 1e-12


def test_terminal_target_bit_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        values = rng.uniform(-5, 5, int(rng.integers(1, 20)))
        reward = float(rng.uniform(0, 100))
        cfg = GaeConfig(gamma=rng.uniform(0, 1), lam=rng.uniform(0, 1), interval=1)
        assert gae_targets(trace(values), reward, cfg).targets[-1] == reward


def test_monte_carlo_limit_exact():
    rng = np.random.default_rng(2)
    values = rng.uniform(-5, 5, 12)
    got = gae_targets(trace(values), 37.25, GaeConfig(gamma=1.0, lam=1.0, interval=1)).targets
    assert np.all(got == 37.25)


def test_td0_limit_exact():
    values = np.array([0.3, -1.2, 4.0, 0.5])
    cfg = GaeConfig(gamma=0.7, lam=0.0, interval=1)
    got = gae_targets(trace(values), 9.0, cfg).targets
    assert np.array_equal(got[:-1], 0.7 * values[1:])
    assert got[-1] == 9.0


def test_linearity_in_reward():
    rng = np.random.default_rng(3)
    values = rng.uniform(-5, 5, 9)
    gamma, lam = 0.93, 0.81
    cfg = GaeConfig(gamma=gamma, lam=lam, interval=1)
    r0 = gae_targets(trace(values), 0.0, cfg).targets
    r1 = gae_targets(trace(values), 1.0, cfg).targets
    r2 = gae_targets(trace(values), 2.0, cfg).targets
    m = len(values)
    slopes = (gamma * lam) ** (m - 1 - np.arange(m))
    assert np.allclose(r1 - r0, slopes, atol=1e-12)
    assert np.allclose(r2 - r1, slopes, atol=1e-12)


def test_gae_requires_detached_trace():
    with pytest.raises(ValueError):
        gae_targets(trace([1.0, 2.0], detached=False), 1.0, GaeConfig())


def test_critic_loss_zero_at_match():
    from seqcritic.gae import GaeTargets

    t = trace([1.0, 2.0, 3.0], detached=False)
    assert critic_loss(t, GaeTargets(targets=np.array([1.0, 2.0, 3.0]))) == 0.0


def test_critic_loss_arithmetic():
    from seqcritic.gae import GaeTargets

    t = trace([0.0, 0.0], detached=False)
    assert critic_loss(t, GaeTargets(targets=np.array([2.0, 4.0]))) == 5.0


def test_critic_loss_matches_naive_loop():
    from seqcritic.gae import GaeTargets

    rng = np.random.default_rng(4)
    values = rng.uniform(-10, 10, 17)
    targets = rng.uniform(-10, 10, 17)
    naive = sum(0.5 * (s - r) ** 2 for s, r in zip(values, targets)) / 17
    got = critic_loss(trace(values, detached=False), GaeTargets(targets=targets))
    assert got == pytest.approx(naive, rel=1e-12)


def test_critic_loss_length_mismatch():
    from seqcritic.gae import GaeTargets

    with pytest.raises(LengthMismatch):
        critic_loss(trace([1.0, 2.0], detached=False), GaeTargets(targets=np.array([1.0])))


def test_noisy_label_sigma_zero_identity():
    assert noisy_label(42.5, 0.0, np.random.default_rng(0)) == 42.5


def test_noisy_label_std():
    rng = np.random.default_rng(11)
    draws = np.array([noisy_label(0.0, 1.0, rng) for _ in range(100_000)])
    assert 0.97 < draws.std() < 1.03


def test_noisy_label_golden_draw():
    assert noisy_label(50.0, 2.0, np.random.default_rng(99)) == pytest.approx(
        50.164988608567405, abs=1e-12
    )


def test_value_trace_validation():
    with pytest.raises(ValueError):
        ValueTrace(steps=np.array([8, 8]), values=np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        ValueTrace(steps=np.array([8]), values=np.array([np.inf]))
    with pytest.raises(LengthMismatch):
        ValueTrace(steps=np.array([8, 16]), values=np.array([1.0]))


def test_gae_config_validation():
    with pytest.raises(ValueError):
        GaeConfig(gamma=1.2)
    with pytest.raises(ValueError):
        GaeConfig(lam=-0.1)
    with pytest.raises(ValueError):
        GaeConfig(interval=0)
