"""Shared test helpers: independent brute-force oracles and dataset builders."""

from __future__ import annotations

import math

import numpy as np
import pytest

from seqcritic import data as data_mod
from seqcritic.env import EnvConfig


# ---------------------------------------------------------------------------
# brute-force correlation oracles (O(n^2) pair counting / naive rank formulas)
# ---------------------------------------------------------------------------

def brute_kendall_tau_b(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(a)
    concordant = discordant = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif da * db > 0:
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    return (concordant - discordant) / denom


def brute_average_ranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ranks = np.empty(len(x))
    for i, v in enumerate(x):
        less = int(np.sum(x < v))
        equal = int(np.sum(x == v))
        ranks[i] = less + (equal + 1) / 2.0
    return ranks


def brute_pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    am, bm = a - a.mean(), b - b.mean()
    return float(np.sum(am * bm) / math.sqrt(np.sum(am * am) * np.sum(bm * bm)))


def brute_spearman(a, b) -> float:
    return brute_pearson(brute_average_ranks(a), brute_average_ranks(b))


# ---------------------------------------------------------------------------
# naive GAE double sum (independent of the backward recursion)
# ---------------------------------------------------------------------------

def brute_gae_targets(values, reward, gamma, lam) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    m = len(values)
    out = np.empty(m)
    for j in range(m):
        acc = 0.0
        for l in range(0, m - j):
            k = j + l
            rew_k = reward if k == m - 1 else 0.0
            v_next = 0.0 if k == m - 1 else values[k + 1]
            acc += (gamma * lam) ** l * (rew_k + gamma * v_next - values[k])
        out[j] = values[j] + acc
    return out


# ---------------------------------------------------------------------------
# independent reward-oracle recomputation from event lists
# ---------------------------------------------------------------------------

def brute_surrogate(prompt_events, decoded_events) -> float:
    p = list(prompt_events)
    e = list(decoded_events)
    if not e:
        return 0.0
    pairs = []
    for cat in set(p):
        p_pos = [i for i, c in enumerate(p) if c == cat]
        e_pos = [i for i, c in enumerate(e) if c == cat]
        pairs.extend(zip(p_pos, e_pos))
    m = len(pairs)
    f1 = 2.0 * m / (len(p) + len(e))
    if m < 2:
        ordf = 1.0
    else:
        conc = tot = 0
        for i in range(m):
            for j in range(i + 1, m):
                tot += 1
                if (pairs[i][0] - pairs[j][0]) * (pairs[i][1] - pairs[j][1]) > 0:
                    conc += 1
        ordf = conc / tot
    return 100.0 * f1 * (0.5 + 0.5 * ordf)


# ---------------------------------------------------------------------------
# dataset builders (cached per test session)
# ---------------------------------------------------------------------------

def build_records(cfg: EnvConfig, n_prompts: int, rollouts: int, seed: int):
    prompts = data_mod.sample_prompts(n_prompts, cfg, seed)
    ds = data_mod.collect(prompts, rollouts, cfg, seed)
    data_mod.split(ds, (0.8, 0.1, 0.1), seed)
    return ds.records


@pytest.fixture(scope="session")
def default_cfg() -> EnvConfig:
    return EnvConfig()


@pytest.fixture(scope="session")
def leaky_records(default_cfg):
    """Moderate leak_prob=0.8 corpus shared by probe/critic example tests."""
    return build_records(default_cfg, 800, 8, seed=101)


@pytest.fixture(scope="session")
def sealed_records():
    """leak_prob=0 corpus for the negative-control example tests."""
    return build_records(EnvConfig(leak_prob=0.0), 800, 8, seed=102)
