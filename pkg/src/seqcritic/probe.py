"""Prefix probing: do early tokens predict global attributes of the full sequence?

Small one-hidden-layer probes map prefix features (token histograms, or the
critic's cumulative embedding) to attributes of the realized output: event
count (regression) and dominant category (classification). Rank correlations
quantify regression quality; targets always come from decoding the generated
grid, never from the prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import critic as critic_mod
from .env import CodeGrid, EnvConfig, decode_events


class Degenerate(ValueError):
    """Probe target or correlation input carries no usable variation."""


@dataclass
class ProbeModel:
    """One-hidden-layer network over a fixed-width feature vector.

    Inputs are standardized with the training-split statistics before the
    first layer.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    task: str                     # "regression" | "classification"
    feature_mode: str
    t_prefix: int

    def forward(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.x_mean) / self.x_scale
        a = np.tanh(xs @ self.w1.T + self.b1)
        return a @ self.w2.T + self.b2

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.forward(x)
        if self.task == "classification":
            return np.argmax(out, axis=1)
        return out[:, 0]


@dataclass(frozen=True)
class CorrelationReport:
    kendall: float
    spearman: float
    pearson: float
    n: int


def kendall(a, b) -> float:
    """Kendall tau-b (tie-corrected)."""
    a, b = _check_pair(a, b)
    return float(stats.kendalltau(a, b, variant="b").statistic)


def spearman(a, b) -> float:
    """Spearman rho with average ranks for ties."""
    a, b = _check_pair(a, b)
    return float(stats.spearmanr(a, b).statistic)


def pearson(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(stats.pearsonr(a, b).statistic)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if len(a) < 2:
        raise ValueError("need at least 2 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise Degenerate("correlation undefined for a constant vector")
    return a, b


def correlation_report(pred, target) -> CorrelationReport:
    return CorrelationReport(
        kendall=kendall(pred, target),
        spearman=spearman(pred, target),
        pearson=pearson(pred, target),
        n=len(pred),
    )


def prefix_features(
    grid: CodeGrid,
    t_prefix: int,
    mode: str = "histogram",
    cfg: EnvConfig | None = None,
    critic_params: "critic_mod.CriticParams | None" = None,
) -> np.ndarray:
    """Feature vector for columns [0, t_prefix).

    histogram: normalized token-id counts pooled across all codebook rows.
    embedding: the critic's cumulative-mean feature at t_prefix.
    """
    if t_prefix > grid.steps or t_prefix < 1:
        raise ValueError(f"t_prefix {t_prefix} outside [1, {grid.steps}]")
    if mode == "histogram":
        if cfg is None:
            raise ValueError("histogram mode needs the environment config")
        counts = np.bincount(
            grid.codes[:, :t_prefix].ravel(), minlength=cfg.vocab.size
        ).astype(np.float64)
        return counts / counts.sum()
    if mode == "embedding":
        if critic_params is None:
            raise ValueError("embedding mode needs critic parameters")
        eprime = critic_mod.embed_prefix(
            CodeGrid(codes=grid.codes[:, :t_prefix]), critic_params
        )
        return eprime.mean(axis=0)
    raise ValueError(f"unknown feature mode {mode!r}")


@dataclass(frozen=True)
class ProbeTrainConfig:
    hidden: int = 64
    learning_rate: float = 1e-2
    steps: int = 3000
    batch_size: int = 256
    seed: int = 0


def _train_mlp(
    x_raw: np.ndarray,
    y: np.ndarray,
    n_out: int,
    task: str,
    cfg: ProbeTrainConfig,
):
    """Adam-trained tanh MLP on standardized inputs; squared loss for regression,
    softmax cross-entropy for classification."""
    rng = np.random.default_rng(cfg.seed)
    x_mean = x_raw.mean(axis=0)
    x_scale = np.maximum(x_raw.std(axis=0), 1e-8)
    x = (x_raw - x_mean) / x_scale
    n, d = x.shape
    w1 = rng.normal(0, 1.0 / np.sqrt(d), (cfg.hidden, d))
    b1 = rng.normal(0, 0.5, cfg.hidden)
    w2 = rng.normal(0, 1.0 / np.sqrt(cfg.hidden), (n_out, cfg.hidden))
    b2 = np.zeros(n_out)

    shapes = [w1.shape, b1.shape, w2.shape, b2.shape]
    sizes = [int(np.prod(s)) for s in shapes]

    def pack(*arrs):
        return np.concatenate([a.ravel() for a in arrs])

    def unpack(v):
        out, i = [], 0
        for s, sz in zip(shapes, sizes):
            out.append(v[i:i + sz].reshape(s))
            i += sz
        return out

    flat = pack(w1, b1, w2, b2)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    for t in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        xb, yb = x[idx], y[idx]
        w1, b1, w2, b2 = unpack(flat)
        z1 = xb @ w1.T + b1
        a1 = np.tanh(z1)
        out = a1 @ w2.T + b2
        if task == "regression":
            dout = (out[:, 0] - yb)[:, None] / len(xb)
        else:
            shifted = out - out.max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            dout = p
            dout[np.arange(len(xb)), yb.astype(int)] -= 1.0
            dout /= len(xb)
        g_w2 = dout.T @ a1
        g_b2 = dout.sum(axis=0)
        dz = (dout @ w2) * (1 - a1 * a1)
        g_w1 = dz.T @ xb
        g_b1 = dz.sum(axis=0)
        g = pack(g_w1, g_b1, g_w2, g_b2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        flat = flat - cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
    return (*unpack(flat), x_mean, x_scale)


def _features_for(records, t_prefix, mode, cfg, critic_params):
    return np.stack(
        [prefix_features(r.grid, t_prefix, mode, cfg, critic_params) for r in records]
    )


def train_count_regressor(
    records: list,
    t_prefix: int,
    cfg: EnvConfig,
    probe_cfg: ProbeTrainConfig | None = None,
    mode: str = "histogram",
    critic_params=None,
) -> tuple[ProbeModel, CorrelationReport]:
    """Regress the realized event count from prefix features; report on test split."""
    probe_cfg = probe_cfg or ProbeTrainConfig()
    if len(records) < 1000:
        raise ValueError("need at least 1000 records")
    # distinct realized categories, read off the generated grid
    targets = {id(r): float(len(set(decode_events(r.grid, cfg)))) for r in records}
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    y_train = np.array([targets[id(r)] for r in train])
    if np.all(y_train == y_train[0]):
        raise Degenerate("count targets are constant")

    x_train = _features_for(train, t_prefix, mode, cfg, critic_params)
    w1, b1, w2, b2, mu, sc = _train_mlp(x_train, y_train, 1, "regression", probe_cfg)
    model = ProbeModel(w1, b1, w2, b2, mu, sc, "regression", mode, t_prefix)

    x_test = _features_for(test, t_prefix, mode, cfg, critic_params)
    y_test = np.array([targets[id(r)] for r in test])
    report = correlation_report(model.predict(x_test), y_test)
    return model, report


def train_category_classifier(
    records: list,
    t_prefix: int,
    cfg: EnvConfig,
    probe_cfg: ProbeTrainConfig | None = None,
    mode: str = "histogram",
    critic_params=None,
) -> tuple[ProbeModel, float, np.ndarray]:
    """Classify the realized category of single-event prompts from prefix features.

    Records whose grid decodes to no event are skipped (nothing to label).
    Returns (model, held-out accuracy, confusion matrix with true-class rows).
    """
    probe_cfg = probe_cfg or ProbeTrainConfig()
    usable = []
    labels = {}
    for r in records:
        if r.prompt.event_count != 1:
            continue
        ev = decode_events(r.grid, cfg)
        if not ev:
            continue
        usable.append(r)
        labels[id(r)] = ev[0]

    train = [r for r in usable if r.split == "train"]
    test = [r for r in usable if r.split == "test"]
    n_cat = cfg.n_event_categories
    present = {labels[id(r)] for r in train}
    if len(present) < n_cat:
        raise Degenerate(
            f"only {len(present)}/{n_cat} categories present in the train split"
        )

    x_train = _features_for(train, t_prefix, mode, cfg, critic_params)
    y_train = np.array([labels[id(r)] for r in train], dtype=np.int64)
    w1, b1, w2, b2, mu, sc = _train_mlp(x_train, y_train, n_cat, "classification", probe_cfg)
    model = ProbeModel(w1, b1, w2, b2, mu, sc, "classification", mode, t_prefix)

    x_test = _features_for(test, t_prefix, mode, cfg, critic_params)
    y_test = np.array([labels[id(r)] for r in test], dtype=np.int64)
    pred = model.predict(x_test)
    confusion = np.zeros((n_cat, n_cat), dtype=np.int64)
    np.add.at(confusion, (y_test, pred), 1)
    accuracy = float(np.mean(pred == y_test))
    return model, accuracy, confusion
