"""Rollout data engine: collect scored rollouts, split by prompt, persist as JSONL.

Every record stores its own generator seed so the grid and score can be
regenerated bit-exactly. Splits are assigned at the prompt level so rollouts of
one prompt never straddle split boundaries. Clean scores are the only scores
persisted; label noise is drawn at training time.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import env_config_hash, env_config_text
from .env import BodyOverflow, CodeGrid, EnvConfig, Prompt, generate, sample_prompt

FORMAT_VERSION = 1

RECORD_FIELDS = (
    "prompt_events", "event_count", "codes", "r", "t",
    "score", "env_seed", "split", "prompt_id",
)


class BadRatios(ValueError):
    pass


class FormatVersionMismatch(ValueError):
    pass


class CorruptRecord(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class RolloutRecord:
    prompt: Prompt
    grid: CodeGrid
    score: float
    env_seed: int
    split: str = ""


@dataclass
class Dataset:
    records: list[RolloutRecord]
    env_cfg: EnvConfig
    rollouts_per_prompt: int
    creation_seed: int
    failures: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> list[RolloutRecord]:
        return [r for r in self.records if r.split == split]

    def split_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts


def sample_prompts(n: int, cfg: EnvConfig, seed: int) -> list[Prompt]:
    """A corpus of n prompts with ids 0..n-1, derived from one seed."""
    root = np.random.default_rng([seed, 0x9201])
    return [
        sample_prompt(rng, cfg, prompt_id=i) for i, rng in enumerate(root.spawn(n))
    ]


def _record_seed(base_seed: int, prompt_id: int, rollout: int) -> int:
    return int(
        np.random.SeedSequence([base_seed, prompt_id, rollout]).generate_state(1)[0]
    )


def _collect_one(args) -> tuple[int, list[tuple], str | None]:
    prompt_events, prompt_id, rollouts, base_seed, cfg = args
    prompt = Prompt(events=prompt_events, prompt_id=prompt_id)
    out = []
    try:
        for j in range(rollouts):
            env_seed = _record_seed(base_seed, prompt_id, j)
            grid, _, reward = generate(prompt, np.random.default_rng(env_seed), cfg)
            out.append((env_seed, reward.score, grid.codes))
    except BodyOverflow as exc:
        return prompt_id, [], f"prompt {prompt_id}: {exc}"
    return prompt_id, out, None


def collect(
    prompts: list[Prompt],
    rollouts_per_prompt: int,
    cfg: EnvConfig,
    seed: int,
    jobs: int = 1,
) -> Dataset:
    """Generate rollouts_per_prompt scored rollouts per prompt.

    Each rollout's rng seed derives from (seed, prompt_id, rollout index), so
    output is byte-identical for any worker count. A prompt that cannot fit in
    the body is skipped and noted in dataset.failures instead of aborting.
    """
    if rollouts_per_prompt < 1:
        raise ValueError("rollouts_per_prompt must be >= 1")
    tasks = [
        (p.events, p.prompt_id, rollouts_per_prompt, seed, cfg) for p in prompts
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_collect_one, tasks, chunksize=16))
    else:
        results = [_collect_one(t) for t in tasks]

    records: list[RolloutRecord] = []
    failures: list[str] = []
    by_id = {p.prompt_id: p for p in prompts}
    for prompt_id, rows, failure in results:
        if failure:
            failures.append(failure)
            continue
        prompt = by_id[prompt_id]
        for env_seed, score, codes in rows:
            records.append(
                RolloutRecord(
                    prompt=prompt, grid=CodeGrid(codes=codes),
                    score=score, env_seed=env_seed,
                )
            )
    return Dataset(
        records=records,
        env_cfg=cfg,
        rollouts_per_prompt=rollouts_per_prompt,
        creation_seed=seed,
        failures=failures,
    )


def split(dataset: Dataset, ratios: tuple[float, float, float], seed: int) -> Dataset:
    """Tag records train/val/test by prompt, never splitting a prompt's rollouts.

    Prompt counts per split are floor(cumulative ratio * n_prompts) boundaries,
    so (0.8, 0.1, 0.1) over 100 prompts yields exactly 80/10/10.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three non-negatives summing to 1, got {ratios}")
    prompt_ids = []
    seen = set()
    for r in dataset.records:
        pid = r.prompt.prompt_id
        if pid not in seen:
            seen.add(pid)
            prompt_ids.append(pid)
    rng = np.random.default_rng([seed, 0x59117])
    order = [prompt_ids[i] for i in rng.permutation(len(prompt_ids))]
    n = len(order)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor((ratios[0] + ratios[1]) * n)) - n_train
    tag = {}
    for i, pid in enumerate(order):
        tag[pid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    for r in dataset.records:
        r.split = tag[r.prompt.prompt_id]
    return dataset


def _record_to_json(r: RolloutRecord) -> str:
    obj = {
        "prompt_events": list(r.prompt.events),
        "event_count": r.prompt.event_count,
        "codes": [int(c) for c in r.grid.codes.ravel()],
        "r": r.grid.codebooks,
        "t": r.grid.steps,
        "score": r.score,
        "env_seed": r.env_seed,
        "split": r.split,
        "prompt_id": r.prompt.prompt_id,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_path(path: str) -> str:
    return f"{path}.manifest.json"


def save(dataset: Dataset, path: str) -> None:
    """Write one JSON record per line plus a sidecar manifest."""
    with open(path, "w") as f:
        for r in dataset.records:
            f.write(_record_to_json(r) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "env_config_hash": env_config_hash(dataset.env_cfg),
        "env_config": env_config_text(dataset.env_cfg),
        "counts": dataset.split_counts(),
        "rollouts_per_prompt": dataset.rollouts_per_prompt,
        "creation_seed": dataset.creation_seed,
        "failures": dataset.failures,
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load(path: str) -> Dataset:
    """Inverse of save; field-for-field lossless including seeds and tags."""
    from .config import env_config_from_text

    with open(manifest_path(path)) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"dataset format version {version}, expected {FORMAT_VERSION}"
        )
    cfg = env_config_from_text(manifest["env_config"])

    records: list[RolloutRecord] = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(line_no, f"bad JSON ({exc.msg})") from exc
            missing = [k for k in RECORD_FIELDS if k not in obj]
            if missing:
                raise CorruptRecord(line_no, f"missing fields {missing}")
            rows, steps = int(obj["r"]), int(obj["t"])
            codes = np.asarray(obj["codes"], dtype=np.int64)
            if codes.size != rows * steps:
                raise CorruptRecord(
                    line_no, f"codes length {codes.size} != r*t = {rows * steps}"
                )
            if int(obj["event_count"]) != len(obj["prompt_events"]):
                raise CorruptRecord(line_no, "event_count disagrees with prompt_events")
            records.append(
                RolloutRecord(
                    prompt=Prompt(
                        events=tuple(int(c) for c in obj["prompt_events"]),
                        prompt_id=int(obj["prompt_id"]),
                    ),
                    grid=CodeGrid(codes=codes.reshape(rows, steps)),
                    score=float(obj["score"]),
                    env_seed=int(obj["env_seed"]),
                    split=str(obj["split"]),
                )
            )
    total = sum(manifest["counts"].values())
    if total != len(records):
        raise CorruptRecord(
            len(records), f"manifest counts {total} != records found {len(records)}"
        )
    return Dataset(
        records=records,
        env_cfg=cfg,
        rollouts_per_prompt=int(manifest["rollouts_per_prompt"]),
        creation_seed=int(manifest["creation_seed"]),
        failures=list(manifest.get("failures", [])),
    )
