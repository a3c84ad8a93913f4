"""Inference-time sampling strategies under exact token-budget accounting.

All strategies run through one staged engine: sample a pool of candidate
prefixes, score them at each interior cut, keep the best few, and extend only
the survivors. Every candidate owns an rng lineage spawned up front, so results
are independent of execution order and a single-stage schedule reproduces
best-of-N bit-exactly.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from . import critic as critic_mod
from .env import (
    CodeGrid,
    EnvConfig,
    GenState,
    Prompt,
    begin_generation,
    clap_surrogate,
    extend_to,
    sample_prompt,
)


class ScheduleCriticMismatch(ValueError):
    """An interior cut step is not one of the critic's supervised steps."""


class BudgetMismatch(RuntimeError):
    """Generated column count disagrees with the schedule's token cost."""


class EmptyBucketWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Stage:
    cut: int
    width: int


@dataclass(frozen=True)
class SearchSchedule:
    """Ordered (cut_step, width) stages; cuts increase, widths never increase."""

    stages: tuple[Stage, ...]

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("schedule must contain at least one stage")
        cuts = [s.cut for s in self.stages]
        widths = [s.width for s in self.stages]
        if any(w < 1 for w in widths):
            raise ValueError("stage widths must be >= 1")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError("cut steps must be strictly increasing")
        if any(b > a for a, b in zip(widths, widths[1:])):
            raise ValueError("stage widths must be non-increasing")


def make_schedule(pairs: list[tuple[int, int]]) -> SearchSchedule:
    return SearchSchedule(stages=tuple(Stage(cut=c, width=w) for c, w in pairs))


def parse_schedule(spec: str) -> SearchSchedule:
    """Parse "8:128,64:2" into a SearchSchedule."""
    pairs = []
    for part in spec.split(","):
        cut, _, width = part.strip().partition(":")
        if not width:
            raise ValueError(f"bad schedule stage {part!r}, expected CUT:WIDTH")
        pairs.append((int(cut), int(width)))
    return make_schedule(pairs)


def format_schedule(schedule: SearchSchedule) -> str:
    return ",".join(f"{s.cut}:{s.width}" for s in schedule.stages)


def schedule_cost(schedule: SearchSchedule) -> int:
    """Tokens generated per codebook row: sum of width * segment length."""
    total, prev = 0, 0
    for s in schedule.stages:
        total += s.width * (s.cut - prev)
        prev = s.cut
    return total


@dataclass
class Candidate:
    index: int
    grid: CodeGrid
    state: GenState


@dataclass
class SearchResult:
    grid: CodeGrid
    score: float                 # oracle surrogate score of the returned grid
    critic_score: float          # critic's terminal value of the returned grid (nan if unused)
    oracle_best: float           # best oracle score among all completed candidates
    cost: int
    stage_survivors: list[list[int]] = field(default_factory=list)


def _critic_prefix_scorer(params: "critic_mod.CriticParams"):
    def scorer(grid: CodeGrid, state: GenState, prompt: Prompt) -> float:
        return critic_mod.score_prefix(grid, prompt, params)

    return scorer


def _select_topk(entries: list[tuple[float, int]], k: int) -> list[int]:
    """Indices of the k best by (score desc, candidate index asc)."""
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][0], entries[i][1]))
    return order[:k]


def run_schedule(
    prompt: Prompt,
    schedule: SearchSchedule,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    critic_params: "critic_mod.CriticParams | None" = None,
    selector: str = "critic",
    prefix_scorer=None,
    temperature: float | None = None,
) -> SearchResult:
    """Staged prefix-first sampling; the workhorse behind every strategy.

    temperature=None prunes by top-k; otherwise survivors are drawn without
    replacement with probability proportional to exp(score/temperature)
    (Gumbel top-k). The generated-column count is asserted against
    schedule_cost at the end of the run.
    """
    t_total = env_cfg.total_steps
    if schedule.stages[-1].cut != t_total:
        raise ValueError(
            f"final cut {schedule.stages[-1].cut} must equal T={t_total}"
        )
    interior = schedule.stages[:-1]
    needs_critic = bool(interior) or (selector == "critic" and schedule.stages[-1].width > 1)
    if prefix_scorer is None and needs_critic:
        if critic_params is None:
            raise ValueError("this schedule/selector needs critic params or a prefix scorer")
        prefix_scorer = _critic_prefix_scorer(critic_params)
    if interior and critic_params is not None:
        for st in interior:
            if st.cut % critic_params.interval != 0:
                raise ScheduleCriticMismatch(
                    f"cut {st.cut} is not a multiple of the critic interval "
                    f"{critic_params.interval}"
                )
    if temperature is not None and temperature <= 0:
        raise ValueError("temperature must be > 0")

    first = schedule.stages[0]
    streams = rng.spawn(first.width)
    cols = 0
    pool: list[Candidate] = []
    for i in range(first.width):
        grid, state = begin_generation(prompt, streams[i], env_cfg, upto=first.cut)
        pool.append(Candidate(index=i, grid=grid, state=state))
    cols += first.width * first.cut

    survivors_log: list[list[int]] = []
    prev_cut = first.cut
    for st in schedule.stages[1:]:
        entries = [
            (prefix_scorer(c.grid, c.state, prompt), c.index) for c in pool
        ]
        if temperature is None:
            keep = _select_topk(entries, st.width)
        else:
            gumbel = -np.log(-np.log(rng.random(len(entries))))
            keys = [(e[0] / temperature + g, e[1]) for e, g in zip(entries, gumbel)]
            keep = _select_topk(keys, st.width)
        pool = [pool[i] for i in keep]
        survivors_log.append([c.index for c in pool])
        next_pool = []
        for c in pool:
            grid, state = extend_to(c.grid, c.state, env_cfg, st.cut)
            next_pool.append(Candidate(index=c.index, grid=grid, state=state))
        pool = next_pool
        cols += st.width * (st.cut - prev_cut)
        prev_cut = st.cut

    expected = schedule_cost(schedule)
    if cols != expected:
        raise BudgetMismatch(f"generated {cols} columns, schedule costs {expected}")

    oracle_scores = [clap_surrogate(prompt, c.grid, env_cfg) for c in pool]
    oracle_best = max(oracle_scores)
    if selector == "oracle":
        best = _select_topk(list(zip(oracle_scores, [c.index for c in pool])), 1)[0]
        critic_score = float("nan")
    elif selector == "critic":
        if len(pool) == 1:
            best = 0
            critic_score = (
                prefix_scorer(pool[0].grid, pool[0].state, prompt)
                if prefix_scorer is not None
                else float("nan")
            )
        else:
            finals = [prefix_scorer(c.grid, c.state, prompt) for c in pool]
            best = _select_topk(list(zip(finals, [c.index for c in pool])), 1)[0]
            critic_score = float(finals[best])
    else:
        raise ValueError(f"unknown selector {selector!r}")

    return SearchResult(
        grid=pool[best].grid,
        score=float(oracle_scores[best]),
        critic_score=float(critic_score),
        oracle_best=float(oracle_best),
        cost=cols,
        stage_survivors=survivors_log,
    )


def run_blind(prompt: Prompt, env_cfg: EnvConfig, rng: np.random.Generator) -> SearchResult:
    """Single unguided rollout; cost T."""
    schedule = make_schedule([(env_cfg.total_steps, 1)])
    return run_schedule(prompt, schedule, env_cfg, rng, selector="oracle")


def run_bon(
    prompt: Prompt,
    n: int,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    selector: str = "oracle",
    critic_params=None,
) -> SearchResult:
    """Best-of-N full rollouts at cost N*T, ranked by the selector."""
    if n < 1:
        raise ValueError("n must be >= 1")
    schedule = make_schedule([(env_cfg.total_steps, n)])
    return run_schedule(
        prompt, schedule, env_cfg, rng,
        critic_params=critic_params, selector=selector,
    )


def run_plan_critic(
    prompt: Prompt,
    schedule: SearchSchedule,
    critic_params,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    prefix_scorer=None,
) -> SearchResult:
    """Prefix-first guided sampling: sample wide, prune early by critic, finish few."""
    return run_schedule(
        prompt, schedule, env_cfg, rng,
        critic_params=critic_params, selector="critic", prefix_scorer=prefix_scorer,
    )


def run_softmax_resample(
    prompt: Prompt,
    schedule: SearchSchedule,
    critic_params,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    temperature: float,
    prefix_scorer=None,
) -> SearchResult:
    """Like run_plan_critic, but survivors are drawn softmax-weighted without replacement."""
    return run_schedule(
        prompt, schedule, env_cfg, rng,
        critic_params=critic_params, selector="critic",
        prefix_scorer=prefix_scorer, temperature=temperature,
    )


@dataclass(frozen=True)
class StrategySpec:
    """Declarative strategy description used by evaluation and the CLI."""

    kind: str                              # blind | bon | plan_critic | softmax
    n: int = 16
    schedule: SearchSchedule | None = None
    selector: str = "oracle"
    temperature: float = 1.0

    @property
    def name(self) -> str:
        if self.kind == "blind":
            return "blind"
        if self.kind == "bon":
            return f"bon{self.n}-{self.selector}"
        sched = format_schedule(self.schedule) if self.schedule else "?"
        if self.kind == "plan_critic":
            return f"plan_critic[{sched}]"
        return f"softmax[{sched}]@{self.temperature:g}"


@dataclass
class StrategyReport:
    strategy: str
    seed: int
    cost: int
    rows: list[tuple[int, int, float, float]]   # (prompt_id, event_count, score, oracle_score)
    wall_time: float

    @property
    def scores(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def overall_mean(self) -> float:
        return float(self.scores.mean())

    def bucket_means(self) -> dict[int, tuple[int, float]]:
        """event_count -> (bucket size, mean score)."""
        out: dict[int, tuple[int, float]] = {}
        counts = sorted({r[1] for r in self.rows})
        for c in counts:
            vals = [r[2] for r in self.rows if r[1] == c]
            out[c] = (len(vals), float(np.mean(vals)))
        return out

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "prompt_id", "event_count", "score",
                        "oracle_score", "cost_tokens", "seed"])
            for pid, count, score, oracle in self.rows:
                w.writerow([self.strategy, pid, count, repr(score), repr(oracle),
                            self.cost, self.seed])

    def write_summary_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "bucket", "n", "mean_score", "cost_tokens", "seed"])
            w.writerow([self.strategy, "overall", len(self.rows),
                        repr(self.overall_mean), self.cost, self.seed])
            for c, (n, mean) in self.bucket_means().items():
                w.writerow([self.strategy, f"event@{c}", n, repr(mean), self.cost, self.seed])


def run_strategy(
    spec: StrategySpec,
    prompt: Prompt,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    critic_params=None,
    prefix_scorer=None,
) -> SearchResult:
    if spec.kind == "blind":
        return run_blind(prompt, env_cfg, rng)
    if spec.kind == "bon":
        return run_bon(prompt, spec.n, env_cfg, rng,
                       selector=spec.selector, critic_params=critic_params)
    if spec.kind == "plan_critic":
        return run_plan_critic(prompt, spec.schedule, critic_params, env_cfg, rng,
                               prefix_scorer=prefix_scorer)
    if spec.kind == "softmax":
        return run_softmax_resample(prompt, spec.schedule, critic_params, env_cfg, rng,
                                    spec.temperature, prefix_scorer=prefix_scorer)
    raise ValueError(f"unknown strategy kind {spec.kind!r}")


def evaluate_strategy(
    spec: StrategySpec,
    prompts: list[Prompt],
    env_cfg: EnvConfig,
    seed: int,
    critic_params=None,
    prefix_scorer=None,
) -> StrategyReport:
    """Run a strategy over a prompt set with per-prompt derived seeds."""
    if not prompts:
        raise ValueError("prompt set is empty")
    root = np.random.default_rng([seed, 0x5EA2C])
    streams = root.spawn(len(prompts))
    rows = []
    cost = None
    t0 = time.perf_counter()
    for prompt, stream in zip(prompts, streams):
        res = run_strategy(spec, prompt, env_cfg, stream,
                           critic_params=critic_params, prefix_scorer=prefix_scorer)
        rows.append((prompt.prompt_id, prompt.event_count, res.score, res.oracle_best))
        if cost is None:
            cost = res.cost
        elif cost != res.cost:
            raise BudgetMismatch("cost varied across prompts")
    wall = time.perf_counter() - t0
    present = {r[1] for r in rows}
    for c in range(env_cfg.count_min, env_cfg.count_max + 1):
        if c not in present:
            warnings.warn(f"no prompts in event-count bucket {c}", EmptyBucketWarning)
    return StrategyReport(strategy=spec.name, seed=seed, cost=cost, rows=rows, wall_time=wall)


def sign_test_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided paired sign test for median(a) > median(b); ties are dropped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must align")
    wins = int(np.sum(a > b))
    losses = int(np.sum(a < b))
    if wins + losses == 0:
        return 1.0
    return float(_scipy_stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def postfix_variance(
    n_prefixes: int,
    n_completions: int,
    env_cfg: EnvConfig,
    seed: int,
    t_prefix: int | None = None,
) -> tuple[list[tuple[int, int, float, float]], float]:
    """Per-prefix completion-score spread versus cross-prefix mean spread.

    Each sampled prefix is completed n_completions times with independent rngs.
    Returns rows (prefix_id, event_count, mean, std) and the summary ratio
    median(per-prefix std) / std(per-prefix means).
    """
    if n_completions < 2:
        raise ValueError("need at least 2 completions per prefix")
    cut = env_cfg.sketch_steps if t_prefix is None else t_prefix
    root = np.random.default_rng([seed, 0xF1C5])
    rows = []
    means, stds = [], []
    for i in range(n_prefixes):
        prompt_rng, gen_rng, completion_root = root.spawn(3)
        prompt = sample_prompt(prompt_rng, env_cfg, prompt_id=i)
        prefix, state = begin_generation(prompt, gen_rng, env_cfg, upto=cut)
        comp_rngs = completion_root.spawn(n_completions)
        scores = np.empty(n_completions)
        for j, crng in enumerate(comp_rngs):
            full, _ = extend_to(prefix, state, env_cfg, env_cfg.total_steps, rng=crng)
            scores[j] = clap_surrogate(prompt, full, env_cfg)
        mean, std = float(scores.mean()), float(scores.std())
        rows.append((i, prompt.event_count, mean, std))
        means.append(mean)
        stds.append(std)
    spread = float(np.std(means))
    ratio = float(np.median(stds) / spread) if spread > 0 else float("inf")
    return rows, ratio
