"""Synthetic multi-codebook token generator with an analytic instruction-following oracle.

The generator is a stand-in for a pretrained autoregressive model: each trajectory
samples a latent plan up front (which events will actually be produced, where, and
how faithfully), weakly leaks that plan into the sketch region at the start of the
sequence, and then realizes it in the body. A deterministic score in [0, 100]
measures how well the decoded events match the prompt.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

CATEGORY_NAMES = [
    "rain", "wind", "dog", "car", "bell",
    "drums", "birds", "engine", "waves", "footsteps",
]

# Spread applied on top of the row-0 hash for secondary codebook rows.
ROW_NOISE_WIDTH = 4

REALIZE, DROP, SUBSTITUTE = "realize", "drop", "substitute"


class ConfigError(ValueError):
    """Invalid environment configuration."""


class BodyOverflow(ValueError):
    """Requested events cannot fit in the body region at minimum run length."""


class StateMismatch(ValueError):
    """Generation state position disagrees with the supplied prefix width."""


@dataclass(frozen=True)
class Vocab:
    """Token-id layout: event / sketch / texture roles plus one silence token."""

    n_event_categories: int
    n_texture_tokens: int

    @property
    def event_base(self) -> int:
        return 0

    @property
    def sketch_base(self) -> int:
        return self.n_event_categories

    @property
    def texture_base(self) -> int:
        return 2 * self.n_event_categories

    @property
    def silence(self) -> int:
        return 2 * self.n_event_categories + self.n_texture_tokens

    @property
    def size(self) -> int:
        return 2 * self.n_event_categories + self.n_texture_tokens + 1

    def event_token(self, category: int) -> int:
        return self.event_base + category

    def sketch_token(self, category: int) -> int:
        return self.sketch_base + category

    def is_event(self, token: int) -> bool:
        return 0 <= token < self.n_event_categories


@dataclass(frozen=True)
class EnvConfig:
    """Environment knobs; file keys follow the flat key=value config format."""

    n_event_categories: int = 10
    codebooks: int = 2          # file key: R
    total_steps: int = 64       # file key: T
    sketch_steps: int = 8       # file key: T_sketch
    leak_prob: float = 0.8
    fidelity_alpha: float = 2.0
    fidelity_beta: float = 4.0
    min_run_len: int = 8
    drop_substitute_split: float = 0.5
    seed: int = 0
    count_min: int = 1
    count_max: int = 5
    n_texture_tokens: int = 6
    body_drop_scale: float = 0.03
    reorder_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.n_event_categories < 2:
            raise ConfigError("n_event_categories must be >= 2")
        if self.codebooks < 1:
            raise ConfigError("R must be >= 1")
        if not 0 < self.sketch_steps < self.total_steps:
            raise ConfigError("need 0 < T_sketch < T")
        for name in ("leak_prob", "drop_substitute_split", "body_drop_scale", "reorder_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.fidelity_alpha < 0 or self.fidelity_beta < 0:
            raise ConfigError("fidelity parameters must be >= 0")
        if self.fidelity_alpha == 0 and self.fidelity_beta == 0:
            raise ConfigError("fidelity_alpha and fidelity_beta cannot both be 0")
        if self.min_run_len < 1:
            raise ConfigError("min_run_len must be >= 1")
        if not 1 <= self.count_min <= self.count_max <= 6:
            raise ConfigError("need 1 <= count_min <= count_max <= 6")
        if self.count_max > self.n_event_categories:
            raise ConfigError("count_max cannot exceed n_event_categories")
        if self.n_texture_tokens < 1:
            raise ConfigError("n_texture_tokens must be >= 1")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_event_categories, self.n_texture_tokens)


def category_name(category: int) -> str:
    if category < len(CATEGORY_NAMES):
        return CATEGORY_NAMES[category]
    return f"object{category}"


@dataclass(frozen=True)
class Prompt:
    """An ordered list of requested event categories plus a textual rendering."""

    events: tuple[int, ...]
    prompt_id: int = 0

    def __post_init__(self) -> None:
        if not 1 <= len(self.events) <= 6:
            raise ConfigError("prompt must contain between 1 and 6 events")

    @property
    def event_count(self) -> int:
        return len(self.events)

    @property
    def text(self) -> str:
        return "Sounds of " + ", then ".join(category_name(c) for c in self.events) + "."


@dataclass(frozen=True)
class PlannedEvent:
    category: int
    start: int
    length: int
    outcome: str            # REALIZE | DROP | SUBSTITUTE
    final_category: int     # == category unless substituted; meaningless for drops


@dataclass(frozen=True)
class LatentPlan:
    """Per-trajectory plan: segment layout plus realize/drop/substitute decisions.

    All score-relevant randomness except segment flakes is decided here, so the
    sketch region can leak it and continuations from a fixed prefix stay nearly
    deterministic in score.
    """

    events: tuple[PlannedEvent, ...]
    fidelity: float
    leak_prob: float

    @property
    def surviving_categories(self) -> tuple[int, ...]:
        return tuple(e.final_category for e in self.events if e.outcome != DROP)


@dataclass(frozen=True, eq=False)
class CodeGrid:
    """An R x T_filled grid of token ids (may be a prefix of a full sequence)."""

    codes: np.ndarray

    def __post_init__(self) -> None:
        if self.codes.ndim != 2:
            raise ConfigError("codes must be a 2-D array")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodeGrid):
            return NotImplemented
        return self.codes.shape == other.codes.shape and bool(
            np.all(self.codes == other.codes)
        )

    @property
    def codebooks(self) -> int:
        return int(self.codes.shape[0])

    @property
    def steps(self) -> int:
        return int(self.codes.shape[1])


@dataclass
class GenState:
    """Opaque continuation state: prompt, plan, position, and this lineage's rng.

    `segment_flakes` holds the body-time per-segment failure draws once the
    generation crossed into the body region; they are continuation randomness,
    not plan randomness.
    """

    prompt: Prompt
    plan: LatentPlan
    position: int
    rng: np.random.Generator
    segment_flakes: np.ndarray | None = None


@dataclass
class RewardSignal:
    """Terminal instruction-following score and its sparse per-step expansion."""

    score: float
    t_total: int
    noisy_label: float | None = None

    def sparse(self) -> np.ndarray:
        out = np.zeros(self.t_total)
        out[-1] = self.score
        return out


def sample_prompt(rng: np.random.Generator, cfg: EnvConfig, prompt_id: int = 0) -> Prompt:
    """Draw a prompt: uniform count in [count_min, count_max], distinct categories."""
    count = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    events = tuple(
        int(c) for c in rng.choice(cfg.n_event_categories, size=count, replace=False)
    )
    return Prompt(events=events, prompt_id=prompt_id)


def sample_plan(prompt: Prompt, rng: np.random.Generator, cfg: EnvConfig) -> LatentPlan:
    """Lay out one body segment per prompt event and draw realization outcomes.

    Consecutive same-category segments are forced to leave a 1-column gap so
    their decoded runs never merge. Raises BodyOverflow when the events cannot
    fit at min_run_len.
    """
    cats = list(prompt.events)
    n = len(cats)
    body_len = cfg.total_steps - cfg.sketch_steps

    if cfg.fidelity_beta == 0:
        fidelity = 1.0
    elif cfg.fidelity_alpha == 0:
        fidelity = 0.0
    else:
        fidelity = float(rng.beta(cfg.fidelity_alpha, cfg.fidelity_beta))

    if cfg.reorder_prob > 0 and rng.random() < cfg.reorder_prob:
        cats = [cats[i] for i in rng.permutation(n)]

    forced_gaps = [0] + [1 if cats[i] == cats[i - 1] else 0 for i in range(1, n)]
    required = n * cfg.min_run_len + sum(forced_gaps)
    if required > body_len:
        raise BodyOverflow(
            f"{n} events at min_run_len={cfg.min_run_len} need {required} steps, "
            f"body has {body_len}"
        )

    slack = body_len - required
    buckets = 2 * n + 1  # n length extensions, n leading gaps, 1 tail gap
    extra = rng.multinomial(slack, np.full(buckets, 1.0 / buckets)) if slack > 0 else np.zeros(buckets, dtype=int)

    prompt_cats = set(prompt.events)
    allowed_subs = [c for c in range(cfg.n_event_categories) if c not in prompt_cats]

    events = []
    pos = cfg.sketch_steps
    for i, cat in enumerate(cats):
        pos += forced_gaps[i] + int(extra[n + i])
        length = cfg.min_run_len + int(extra[i])
        if rng.random() < fidelity:
            outcome, final = REALIZE, cat
        elif rng.random() < cfg.drop_substitute_split or not allowed_subs:
            outcome, final = DROP, cat
        else:
            outcome, final = SUBSTITUTE, int(allowed_subs[rng.integers(len(allowed_subs))])
        events.append(PlannedEvent(cat, pos, length, outcome, final))
        pos += length
    assert pos <= cfg.total_steps

    return LatentPlan(events=tuple(events), fidelity=fidelity, leak_prob=cfg.leak_prob)


def _hash_row(row0: np.ndarray, row: int, vocab_size: int) -> np.ndarray:
    return (row0 * 31 + row * 17) % vocab_size


def _emit_columns(
    grid: np.ndarray,
    state: GenState,
    cfg: EnvConfig,
    lo: int,
    hi: int,
) -> None:
    """Fill columns [lo, hi) in place, consuming state.rng strictly left-to-right.

    Per-column rng cost is fixed (2 uniforms in the sketch region plus R-1 noise
    uniforms everywhere, interleaved column-major; one uniform per plan segment
    when first entering the body), so splitting a span across calls consumes the
    identical stream.
    """
    vocab = cfg.vocab
    plan = state.plan
    rng = state.rng
    surviving = plan.surviving_categories
    n_noise = cfg.codebooks - 1

    def fill_noise_rows(a: int, b: int, noise: np.ndarray) -> None:
        for r in range(1, cfg.codebooks):
            base = _hash_row(grid[0, a:b], r, vocab.size)
            jitter = (noise[:, r - 1] * ROW_NOISE_WIDTH).astype(np.int64)
            grid[r, a:b] = (base + jitter) % vocab.size

    sketch_hi = min(hi, cfg.sketch_steps)
    if lo < sketch_hi:
        n = sketch_hi - lo
        u = rng.random((n, 2 + n_noise))
        for k, t in enumerate(range(lo, sketch_hi)):
            if surviving and u[k, 0] < plan.leak_prob:
                cat = surviving[t % len(surviving)]
                grid[0, t] = vocab.sketch_token(cat)
            else:
                grid[0, t] = vocab.texture_base + int(u[k, 1] * cfg.n_texture_tokens)
        if n_noise:
            fill_noise_rows(lo, sketch_hi, u[:, 2:])

    body_lo = max(lo, cfg.sketch_steps)
    if body_lo < hi:
        if state.segment_flakes is None:
            flake_p = cfg.body_drop_scale * (1.0 - plan.fidelity)
            state.segment_flakes = rng.random(len(plan.events)) < flake_p
        grid[0, body_lo:hi] = vocab.silence
        for ev, flaked in zip(plan.events, state.segment_flakes):
            if ev.outcome == DROP or flaked:
                continue
            a, b = max(ev.start, body_lo), min(ev.start + ev.length, hi)
            if a < b:
                grid[0, a:b] = vocab.event_token(ev.final_category)
        if n_noise:
            fill_noise_rows(body_lo, hi, rng.random((hi - body_lo, n_noise)))


def begin_generation(
    prompt: Prompt,
    rng: np.random.Generator,
    cfg: EnvConfig,
    upto: int | None = None,
) -> tuple[CodeGrid, GenState]:
    """Sample a plan and generate columns [0, upto); the state owns the rng."""
    upto = cfg.total_steps if upto is None else upto
    if not 0 <= upto <= cfg.total_steps:
        raise ConfigError("upto out of range")
    plan = sample_plan(prompt, rng, cfg)
    state = GenState(prompt=prompt, plan=plan, position=0, rng=rng)
    grid = np.zeros((cfg.codebooks, upto), dtype=np.int64)
    if upto > 0:
        _emit_columns(grid, state, cfg, 0, upto)
    state.position = upto
    return CodeGrid(codes=grid), state


def extend_to(
    prefix: CodeGrid,
    state: GenState,
    cfg: EnvConfig,
    upto: int,
    rng: np.random.Generator | None = None,
) -> tuple[CodeGrid, GenState]:
    """Extend a prefix to `upto` columns under the same plan.

    With rng=None the lineage stream stored in the state is resumed (on a copy,
    so the input state stays reusable); passing an rng makes an independent
    continuation branch. Never mutates its inputs.
    """
    if state.position != prefix.steps:
        raise StateMismatch(
            f"state position {state.position} != prefix width {prefix.steps}"
        )
    if not state.position <= upto <= cfg.total_steps:
        raise ConfigError("upto out of range")
    src = copy.deepcopy(state.rng) if rng is None else rng
    new_state = GenState(
        prompt=state.prompt,
        plan=state.plan,
        position=state.position,
        rng=src,
        segment_flakes=None if state.segment_flakes is None else state.segment_flakes.copy(),
    )
    grid = np.zeros((cfg.codebooks, upto), dtype=np.int64)
    grid[:, : prefix.steps] = prefix.codes
    if upto > state.position:
        _emit_columns(grid, new_state, cfg, state.position, upto)
    new_state.position = upto
    return CodeGrid(codes=grid), new_state


def generate(
    prompt: Prompt,
    rng: np.random.Generator,
    cfg: EnvConfig,
) -> tuple[CodeGrid, GenState, RewardSignal]:
    """Generate a full sequence and score it."""
    grid, state = begin_generation(prompt, rng, cfg, upto=cfg.total_steps)
    reward = RewardSignal(score=clap_surrogate(prompt, grid, cfg), t_total=cfg.total_steps)
    return grid, state, reward


def continue_from(
    prefix: CodeGrid,
    state: GenState,
    cfg: EnvConfig,
    rng: np.random.Generator | None = None,
) -> tuple[CodeGrid, RewardSignal]:
    """Complete columns [position, T) under the prefix's plan and score the result."""
    grid, _ = extend_to(prefix, state, cfg, cfg.total_steps, rng=rng)
    return grid, RewardSignal(
        score=clap_surrogate(state.prompt, grid, cfg), t_total=cfg.total_steps
    )


def decode_events(grid: CodeGrid, cfg: EnvConfig) -> list[int]:
    """Read maximal event-token runs (length >= min_run_len) from row 0 of the body."""
    row = grid.codes[0, cfg.sketch_steps:]
    vocab = cfg.vocab
    out: list[int] = []
    t, n = 0, row.shape[0]
    while t < n:
        tok = int(row[t])
        run = t + 1
        while run < n and int(row[run]) == tok:
            run += 1
        if vocab.is_event(tok) and run - t >= cfg.min_run_len:
            out.append(tok - vocab.event_base)
        t = run
    return out


def _matched_pairs(p: list[int], e: list[int]) -> list[tuple[int, int]]:
    """Match k-th occurrence of each category in p to the k-th in e, by position."""
    pos_p: dict[int, list[int]] = {}
    pos_e: dict[int, list[int]] = {}
    for i, c in enumerate(p):
        pos_p.setdefault(c, []).append(i)
    for i, c in enumerate(e):
        pos_e.setdefault(c, []).append(i)
    pairs = []
    for c, plist in pos_p.items():
        elist = pos_e.get(c, [])
        pairs.extend(zip(plist, elist))
    return pairs


def clap_surrogate(prompt: Prompt, grid: CodeGrid, cfg: EnvConfig) -> float:
    """Deterministic score in [0, 100]: multiset F1 times an order-agreement factor.

    ORD is the fraction of concordant ordered pairs among matched events and is
    defined as 1 when fewer than two events match (avoids 0/0).
    """
    p = list(prompt.events)
    e = decode_events(grid, cfg)
    if not e:
        return 0.0
    pairs = _matched_pairs(p, e)
    m = len(pairs)
    f1 = 2.0 * m / (len(p) + len(e))
    if m < 2:
        ord_frac = 1.0
    else:
        concordant = 0
        total = 0
        for i in range(m):
            for j in range(i + 1, m):
                total += 1
                if (pairs[i][0] - pairs[j][0]) * (pairs[i][1] - pairs[j][1]) > 0:
                    concordant += 1
        ord_frac = concordant / total
    return 100.0 * f1 * (0.5 + 0.5 * ord_frac)
