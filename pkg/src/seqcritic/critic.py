"""Value critic over token-grid prefixes, trained with GAE-style targets.

Architecture: per-codebook embedding tables collapsed by summation, causal
cumulative-mean pooling over the collapsed sequence, prompt features
(mean category embedding plus a scaled event count), and a two-layer tanh head
emitting one scalar value per supervised step. Gradients are derived by hand so
they can be checked against finite differences.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .env import CodeGrid, Prompt
from .gae import GaeConfig, ValueTrace, gae_targets, supervised_steps

# Fixed output scaling so head parameters stay O(1) while values span [0, 100].
VALUE_SCALE = 100.0

CHECKPOINT_VERSION = 1


class CodeOutOfRange(ValueError):
    """A grid token id exceeds the embedding table."""


class StepOutOfRange(ValueError):
    """A requested scoring step is outside the prefix or not a supervised step."""


class Diverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class CriticParams:
    embed: list[np.ndarray]        # R tables, each (V, d)
    prompt_embed: np.ndarray       # (n_categories, d)
    count_scale: float
    w1: np.ndarray                 # (h, 2d+1)
    b1: np.ndarray                 # (h,)
    w2: np.ndarray                 # (h,)
    b2: float
    interval: int                  # supervised-step spacing the critic was built for

    @property
    def dim(self) -> int:
        return self.embed[0].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed[0].shape[0]

    @property
    def codebooks(self) -> int:
        return len(self.embed)

    def flat(self) -> np.ndarray:
        parts = [t.ravel() for t in self.embed]
        parts += [self.prompt_embed.ravel(), np.array([self.count_scale]),
                  self.w1.ravel(), self.b1, self.w2, np.array([self.b2])]
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "CriticParams":
        i = 0

        def take(shape):
            nonlocal i
            n = int(np.prod(shape))
            chunk = vec[i:i + n].reshape(shape)
            i += n
            return chunk.copy()

        out = CriticParams(
            embed=[take(t.shape) for t in self.embed],
            prompt_embed=take(self.prompt_embed.shape),
            count_scale=float(take((1,))[0]),
            w1=take(self.w1.shape),
            b1=take(self.b1.shape),
            w2=take(self.w2.shape),
            b2=float(take((1,))[0]),
            interval=self.interval,
        )
        assert i == len(vec)
        return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 4000
    batch_size: int = 64
    seed: int = 0
    val_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden_width: int = 32
    head_width: int = 32
    gae: GaeConfig = field(default_factory=GaeConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_params(
    codebooks: int,
    vocab_size: int,
    n_categories: int,
    dim: int,
    head_width: int,
    interval: int,
    rng: np.random.Generator,
) -> CriticParams:
    d_in = 2 * dim + 1
    return CriticParams(
        embed=[rng.normal(0, 0.3, (vocab_size, dim)) for _ in range(codebooks)],
        prompt_embed=rng.normal(0, 0.3, (n_categories, dim)),
        count_scale=1.0,
        w1=rng.normal(0, 1.0 / np.sqrt(d_in), (head_width, d_in)),
        b1=rng.normal(0, 0.5, head_width),
        w2=rng.normal(0, 1.0 / np.sqrt(head_width), head_width),
        b2=0.0,
        interval=interval,
    )


def embed_prefix(grid: CodeGrid, params: CriticParams) -> np.ndarray:
    """Collapse codebook rows by summing their embeddings: (T, d)."""
    codes = grid.codes
    if codes.shape[0] != params.codebooks:
        raise CodeOutOfRange(
            f"grid has {codes.shape[0]} codebook rows, params expect {params.codebooks}"
        )
    if codes.min() < 0 or codes.max() >= params.vocab_size:
        raise CodeOutOfRange(f"token id outside [0, {params.vocab_size})")
    out = np.zeros((codes.shape[1], params.dim))
    for r in range(params.codebooks):
        out += params.embed[r][codes[r]]
    return out


def _prompt_features(prompts: list[Prompt], params: CriticParams) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack([params.prompt_embed[list(p.events)].mean(axis=0) for p in prompts])
    counts = np.array([p.event_count for p in prompts], dtype=np.float64)
    return feats, counts


def _forward_batch(
    codes: np.ndarray,          # (B, R, T)
    prompts: list[Prompt],
    steps: np.ndarray,          # (M,) 1-based column counts
    params: CriticParams,
):
    """Batched forward pass; returns values (B, M) plus caches for backward."""
    b, n_rows, t = codes.shape
    eprime = np.zeros((b, t, params.dim))
    for r in range(n_rows):
        eprime += params.embed[r][codes[:, r, :]]
    cumsum = np.cumsum(eprime, axis=1)
    cum = cumsum[:, steps - 1, :] / steps[None, :, None]      # (B, M, d)

    pfeat, counts = _prompt_features(prompts, params)
    m = len(steps)
    feats = np.empty((b, m, 2 * params.dim + 1))
    feats[:, :, : params.dim] = cum
    feats[:, :, params.dim : 2 * params.dim] = pfeat[:, None, :]
    feats[:, :, -1] = (params.count_scale * counts)[:, None]

    z1 = feats @ params.w1.T + params.b1
    a1 = np.tanh(z1)
    values = VALUE_SCALE * (a1 @ params.w2 + params.b2)       # (B, M)
    cache = (codes, prompts, steps, feats, a1, counts)
    return values, cache


def _backward_batch(dvalues: np.ndarray, cache, params: CriticParams) -> "CriticGrads":
    codes, prompts, steps, feats, a1, counts = cache
    b, _, t = codes.shape
    d = params.dim

    ds = dvalues * VALUE_SCALE                                 # (B, M)
    g_b2 = float(ds.sum())
    g_w2 = np.einsum("bm,bmh->h", ds, a1)
    dz = ds[:, :, None] * params.w2[None, None, :] * (1.0 - a1 * a1)
    g_w1 = np.einsum("bmh,bmf->hf", dz, feats)
    g_b1 = dz.sum(axis=(0, 1))
    dfeats = dz @ params.w1                                    # (B, M, 2d+1)

    dcum = dfeats[:, :, :d]
    dpfeat = dfeats[:, :, d : 2 * d].sum(axis=1)               # (B, d)
    dcount_feat = dfeats[:, :, -1].sum(axis=1)                 # (B,)
    g_count_scale = float(np.dot(dcount_feat, counts))

    g_prompt = np.zeros_like(params.prompt_embed)
    for i, p in enumerate(prompts):
        np.add.at(g_prompt, list(p.events), dpfeat[i] / p.event_count)

    # de'[tau] = sum over steps m with t_m > tau of dcum[m] / t_m
    contrib = dcum / steps[None, :, None]
    suffix = np.zeros((b, len(steps) + 1, d))
    suffix[:, :-1, :] = np.cumsum(contrib[:, ::-1, :], axis=1)[:, ::-1, :]
    first_m = np.searchsorted(steps, np.arange(t) + 1, side="left")
    deprime = suffix[:, first_m, :]                            # (B, T, d)

    g_embed = [np.zeros_like(tab) for tab in params.embed]
    flat_de = deprime.reshape(-1, d)
    for r in range(params.codebooks):
        np.add.at(g_embed[r], codes[:, r, :].ravel(), flat_de)

    return CriticGrads(g_embed, g_prompt, g_count_scale, g_w1, g_b1, g_w2, g_b2)


@dataclass
class CriticGrads:
    embed: list[np.ndarray]
    prompt_embed: np.ndarray
    count_scale: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def flat(self) -> np.ndarray:
        parts = [t.ravel() for t in self.embed]
        parts += [self.prompt_embed.ravel(), np.array([self.count_scale]),
                  self.w1.ravel(), self.b1, self.w2, np.array([self.b2])]
        return np.concatenate(parts)


def _validate_steps(steps: np.ndarray, t_total: int) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.int64)
    if len(steps) == 0 or np.any(np.diff(steps) <= 0):
        raise StepOutOfRange("steps must be nonempty and strictly increasing")
    if steps[0] < 1 or steps[-1] > t_total:
        raise StepOutOfRange(f"steps must lie in [1, {t_total}]")
    return steps


def encode_and_score(
    eprime: np.ndarray,
    prompt: Prompt,
    steps: np.ndarray,
    params: CriticParams,
) -> ValueTrace:
    """Causal per-step values: each value depends only on columns before its step."""
    steps = _validate_steps(steps, eprime.shape[0])
    cumsum = np.cumsum(eprime, axis=0)
    cum = cumsum[steps - 1, :] / steps[:, None]
    pfeat = params.prompt_embed[list(prompt.events)].mean(axis=0)
    feats = np.concatenate(
        [cum,
         np.broadcast_to(pfeat, (len(steps), params.dim)),
         np.full((len(steps), 1), params.count_scale * prompt.event_count)],
        axis=1,
    )
    a1 = np.tanh(feats @ params.w1.T + params.b1)
    values = VALUE_SCALE * (a1 @ params.w2 + params.b2)
    return ValueTrace(steps=steps, values=values, detached=False)


def score_prefix(prefix: CodeGrid, prompt: Prompt, params: CriticParams) -> float:
    """Value at the prefix's final column; the width must be a supervised step."""
    if prefix.steps % params.interval != 0 or prefix.steps == 0:
        raise StepOutOfRange(
            f"prefix width {prefix.steps} is not a multiple of interval {params.interval}"
        )
    trace = encode_and_score(
        embed_prefix(prefix, params), prompt, np.array([prefix.steps]), params
    )
    return float(trace.values[-1])


def batch_values(
    grids: list[CodeGrid] | np.ndarray,
    prompts: list[Prompt],
    steps: np.ndarray,
    params: CriticParams,
) -> np.ndarray:
    """Vectorized values (B, M) for same-shape grids; matches encode_and_score."""
    codes = grids if isinstance(grids, np.ndarray) else np.stack([g.codes for g in grids])
    steps = _validate_steps(steps, codes.shape[2])
    values, _ = _forward_batch(codes, prompts, steps, params)
    return values


def loss_and_grad(
    batch: list[tuple[CodeGrid, Prompt, float]],
    params: CriticParams,
    gae_cfg: GaeConfig,
    old_params: CriticParams | None = None,
    targets: np.ndarray | None = None,
) -> tuple[float, CriticGrads]:
    """Mean GAE regression loss over the batch and its exact analytic gradient.

    Targets are built from a detached pass (old_params, defaulting to the current
    parameters) and treated as constants; `targets` overrides them entirely.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    codes = np.stack([g.codes for g, _, _ in batch])
    prompts = [p for _, p, _ in batch]
    labels = np.array([y for _, _, y in batch], dtype=np.float64)
    steps = supervised_steps(codes.shape[2], gae_cfg.interval)

    values, cache = _forward_batch(codes, prompts, steps, params)
    if targets is None:
        if old_params is None:
            old_values = values
        else:
            old_values, _ = _forward_batch(codes, prompts, steps, old_params)
        targets = np.empty_like(values)
        for i in range(len(batch)):
            trace = ValueTrace(steps=steps, values=old_values[i], detached=True)
            targets[i] = gae_targets(trace, labels[i], gae_cfg).targets

    resid = values - targets
    b, m = resid.shape
    loss = float(np.sum(0.5 * resid * resid) / (b * m))
    grads = _backward_batch(resid / (b * m), cache, params)
    return loss, grads


class Adam:
    """Adam with bias correction on the flattened parameter vector."""

    def __init__(self, cfg: TrainConfig, n_params: int):
        self.cfg = cfg
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, flat_params: np.ndarray, flat_grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * flat_grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * flat_grad * flat_grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return flat_params - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


def train(
    records: list,
    cfg: TrainConfig,
    codebooks: int,
    vocab_size: int,
    n_categories: int,
) -> tuple[CriticParams, list[tuple[int, float, float]]]:
    """Train on records with split=='train', validating on split=='val'.

    Records need .grid, .prompt, .score and .split attributes. Label noise is
    re-sampled every epoch; validation uses clean scores. Deterministic given
    cfg.seed. Raises Diverged on non-finite loss.
    """
    rng = np.random.default_rng(cfg.seed)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ValueError("no training records")

    params = init_params(
        codebooks, vocab_size, n_categories,
        cfg.hidden_width, cfg.head_width, cfg.gae.interval, rng,
    )
    flat = params.flat()
    opt = Adam(cfg, len(flat))

    def val_loss(p: CriticParams) -> float:
        if not val_recs:
            return float("nan")
        batch = [(r.grid, r.prompt, r.score) for r in val_recs[:512]]
        loss, _ = loss_and_grad(batch, p, cfg.gae)
        return loss

    curve: list[tuple[int, float, float]] = []
    initial_val = val_loss(params)
    curve.append((0, float("nan"), initial_val))

    step = 0
    sigma = cfg.gae.label_noise_sigma
    n = len(train_recs)
    while step < cfg.steps:
        order = rng.permutation(n)
        noise = sigma * rng.normal(size=n) if sigma > 0 else np.zeros(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = [
                (train_recs[i].grid, train_recs[i].prompt, train_recs[i].score + noise[i])
                for i in idx
            ]
            loss, grads = loss_and_grad(batch, params, cfg.gae)
            if not np.isfinite(loss):
                raise Diverged(f"loss became non-finite at step {step}")
            flat = opt.step(flat, grads.flat())
            params = params.with_flat(flat)
            step += 1
            if step % cfg.val_every == 0 or step == cfg.steps:
                curve.append((step, loss, val_loss(params)))
            if step >= cfg.steps:
                break
    return params, curve


def save_params(params: CriticParams, path: str) -> None:
    """Checkpoint: npz container with a shape/meta header and row-major arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "codebooks": params.codebooks,
        "vocab_size": params.vocab_size,
        "n_categories": int(params.prompt_embed.shape[0]),
        "dim": params.dim,
        "head_width": int(params.w1.shape[0]),
        "interval": params.interval,
        "count_scale": params.count_scale,
        "b2": params.b2,
    }
    arrays = {f"embed_{r}": params.embed[r] for r in range(params.codebooks)}
    arrays.update(prompt_embed=params.prompt_embed, w1=params.w1, b1=params.b1, w2=params.w2)
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_params(path: str) -> CriticParams:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
            )
        return CriticParams(
            embed=[z[f"embed_{r}"] for r in range(meta["codebooks"])],
            prompt_embed=z["prompt_embed"],
            count_scale=float(meta["count_scale"]),
            w1=z["w1"],
            b1=z["b1"],
            w2=z["w2"],
            b2=float(meta["b2"]),
            interval=int(meta["interval"]),
        )
