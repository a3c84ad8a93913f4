"""Credit-assignment math: TD residuals, lambda-weighted value targets, loss, noise.

All operations work on the subsampled supervised-step grid (positions 1..M with
the last position at the terminal step), with a sparse reward that is zero
everywhere except the terminal step. The bootstrap value past the terminal
position is defined as 0, which makes the terminal target equal the reward
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BadInterval(ValueError):
    """Supervision interval does not divide the sequence length."""


class LengthMismatch(ValueError):
    """Value trace and target vectors have different lengths."""


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95                 # file key: lambda
    interval: int = 8
    label_noise_sigma: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.label_noise_sigma < 0:
            raise ValueError("label_noise_sigma must be >= 0")


@dataclass
class ValueTrace:
    """Value estimates at strictly increasing supervised steps (last step = T)."""

    steps: np.ndarray
    values: np.ndarray
    detached: bool = False

    def __post_init__(self) -> None:
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.steps.shape != self.values.shape or self.steps.ndim != 1:
            raise LengthMismatch("steps and values must be 1-D and aligned")
        if len(self.steps) == 0:
            raise ValueError("trace must contain at least one step")
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("steps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")


@dataclass(frozen=True)
class GaeTargets:
    targets: np.ndarray


def supervised_steps(t_total: int, interval: int) -> np.ndarray:
    """Steps [K, 2K, ..., T]; raises BadInterval when K does not divide T."""
    if interval < 1 or t_total % interval != 0:
        raise BadInterval(f"interval {interval} does not divide T={t_total}")
    return np.arange(interval, t_total + 1, interval, dtype=np.int64)


def td_residuals(s_old: ValueTrace, reward: float, gamma: float) -> np.ndarray:
    """delta_j = r_j + gamma * v_{j+1} - v_j on the subsampled grid.

    The per-position reward is 0 except at the last position, where it equals
    `reward`; the bootstrap value past the last position is 0.
    """
    v = s_old.values
    v_next = np.concatenate([v[1:], [0.0]])
    rew = np.zeros_like(v)
    rew[-1] = reward
    return rew + gamma * v_next - v


def gae_targets(s_old: ValueTrace, reward: float, cfg: GaeConfig) -> GaeTargets:
    """Backward-recursion targets: r_j = v_j + sum_l (gamma*lambda)^l * delta_{j+l}.

    The recursion A_j = delta_j + gamma*lambda*A_{j+1} evaluates the sum in one
    pass; the terminal target equals the reward bit-exactly.
    """
    if not s_old.detached:
        raise ValueError("gae_targets requires a detached value trace")
    v = s_old.values
    # Algebraically exact limit cases, kept free of recursion rounding.
    if cfg.gamma == 1.0 and cfg.lam == 1.0:
        return GaeTargets(targets=np.full_like(v, reward))
    if cfg.lam == 0.0:
        targets = np.empty_like(v)
        targets[:-1] = cfg.gamma * v[1:]
        targets[-1] = reward
        return GaeTargets(targets=targets)
    delta = td_residuals(s_old, reward, cfg.gamma)
    decay = cfg.gamma * cfg.lam
    adv = np.empty_like(delta)
    acc = 0.0
    for j in range(len(delta) - 1, -1, -1):
        acc = delta[j] + decay * acc
        adv[j] = acc
    targets = v + adv
    targets[-1] = reward  # exact: v_M + (reward - v_M) telescopes analytically
    return GaeTargets(targets=targets)


def critic_loss(s: ValueTrace, r: GaeTargets) -> float:
    """Mean over positions of 0.5 * (s_j - r_j)^2."""
    if s.values.shape != r.targets.shape:
        raise LengthMismatch(
            f"trace length {s.values.shape[0]} != target length {r.targets.shape[0]}"
        )
    d = s.values - r.targets
    return float(np.mean(0.5 * d * d))


def noisy_label(reward: float, sigma: float, rng: np.random.Generator) -> float:
    """reward + N(0, sigma^2); sigma=0 returns the reward unchanged."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    draw = rng.normal()
    if sigma == 0.0:
        return float(reward)
    return float(reward + sigma * draw)
