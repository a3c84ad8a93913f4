"""Batch experiment driver: every study in the lab behind one subcommand.

Outputs are machine-readable CSV (plus small SVG renderings) under --out, with
a run manifest recording the config hash and seed. Exit codes: 0 ok, 2 config
error, 3 data error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, critic, data, gae, probe, search, svg
from .config import (
    env_config_from_mapping,
    env_config_hash,
    load_config_file,
    train_config_from_mapping,
)
from .env import BodyOverflow, ConfigError, EnvConfig

CONFIG_ERRORS = (
    ConfigError,
    gae.BadInterval,
    data.BadRatios,
    search.ScheduleCriticMismatch,
    ValueError,
)
DATA_ERRORS = (FileNotFoundError, data.CorruptRecord, data.FormatVersionMismatch, BodyOverflow)


def _load_ctx(args) -> tuple[EnvConfig, dict[str, str], int]:
    mapping = load_config_file(args.config) if args.config else {}
    env_cfg = env_config_from_mapping(mapping)
    seed = args.seed if args.seed is not None else env_cfg.seed
    return env_cfg, mapping, seed


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, args, env_cfg: EnvConfig, seed: int) -> None:
    manifest = {
        "command": args.command,
        "args": {
            k: v for k, v in sorted(vars(args).items())
            if k != "func" and v is not None
        },
        "seed": seed,
        "env_config_hash": env_config_hash(env_cfg),
        "versions": {
            "seqcritic": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(out / "run_manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def cmd_budget(args) -> int:
    schedule = search.parse_schedule(args.schedule)
    print(search.schedule_cost(schedule))
    return 0


def cmd_gen_data(args) -> int:
    env_cfg, _, seed = _load_ctx(args)
    out = _outdir(args)
    prompts = data.sample_prompts(args.prompts, env_cfg, seed)
    dataset = data.collect(prompts, args.rollouts, env_cfg, seed, jobs=args.jobs)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    data.split(dataset, ratios, seed)
    path = out / "dataset.jsonl"
    data.save(dataset, str(path))
    _write_run_manifest(out, args, env_cfg, seed)
    for failure in dataset.failures:
        print(f"skipped: {failure}", file=sys.stderr)
    print(f"wrote {len(dataset)} records to {path}")
    return 0


def cmd_train_critic(args) -> int:
    env_cfg, mapping, seed = _load_ctx(args)
    out = _outdir(args)
    dataset = data.load(args.data)
    train_cfg = train_config_from_mapping(mapping, seed=seed)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    params, curve = critic.train(
        dataset.records,
        train_cfg,
        codebooks=dataset.env_cfg.codebooks,
        vocab_size=dataset.env_cfg.vocab.size,
        n_categories=dataset.env_cfg.n_event_categories,
    )
    critic.save_params(params, str(out / "critic.npz"))
    _write_csv(
        out / "loss_curve.csv",
        ["step", "train_loss", "val_loss"],
        [[s, repr(tr), repr(vl)] for s, tr, vl in curve],
    )
    svg.render_lines(
        str(out / "loss_curve.svg"),
        [
            ("train", [c[0] for c in curve[1:]], [c[1] for c in curve[1:]]),
            ("val", [c[0] for c in curve], [c[2] for c in curve]),
        ],
        "critic training", "step", "loss",
    )
    _write_run_manifest(out, args, env_cfg, seed)
    print(f"final val loss {curve[-1][2]:.3f}; checkpoint at {out / 'critic.npz'}")
    return 0


def cmd_probe(args) -> int:
    env_cfg, _, seed = _load_ctx(args)
    out = _outdir(args)
    dataset = data.load(args.data)
    cfg = dataset.env_cfg
    critic_params = critic.load_params(args.critic) if args.critic else None
    probe_cfg = probe.ProbeTrainConfig(seed=seed)
    t_prefix = args.t_prefix if args.t_prefix is not None else cfg.sketch_steps

    rows = []
    _, report = probe.train_count_regressor(
        dataset.records, t_prefix, cfg, probe_cfg,
        mode=args.mode, critic_params=critic_params,
    )
    rows.append(["event_count", t_prefix, cfg.leak_prob, repr(report.kendall),
                 repr(report.spearman), repr(report.pearson), report.n])

    try:
        _, accuracy, confusion = probe.train_category_classifier(
            dataset.records, t_prefix, cfg, probe_cfg,
            mode=args.mode, critic_params=critic_params,
        )
        _write_csv(
            out / "probe_confusion.csv",
            ["true\\pred"] + [str(c) for c in range(cfg.n_event_categories)],
            [[str(i)] + [int(x) for x in confusion[i]]
             for i in range(cfg.n_event_categories)],
        )
        rows.append(["category_accuracy", t_prefix, cfg.leak_prob,
                     "", "", repr(accuracy), int(confusion.sum())])
    except probe.Degenerate as exc:
        print(f"classifier skipped: {exc}", file=sys.stderr)

    _write_csv(
        out / "probe_correlations.csv",
        ["attribute", "T_prefix", "leak_prob", "kendall", "spearman", "pearson", "n"],
        rows,
    )
    _write_run_manifest(out, args, env_cfg, seed)
    print(f"count probe spearman {report.spearman:.3f} over {report.n} held-out records")
    return 0


def _strategy_from_args(args) -> search.StrategySpec:
    schedule = search.parse_schedule(args.schedule) if args.schedule else None
    return search.StrategySpec(
        kind=args.strategy,
        n=args.n,
        schedule=schedule,
        selector=args.selector,
        temperature=args.temperature,
    )


def cmd_sample(args) -> int:
    env_cfg, _, seed = _load_ctx(args)
    out = _outdir(args)
    spec = _strategy_from_args(args)
    critic_params = critic.load_params(args.critic) if args.critic else None
    prompts = data.sample_prompts(args.n_prompts, env_cfg, seed + 1)
    report = search.evaluate_strategy(
        spec, prompts, env_cfg, seed, critic_params=critic_params
    )
    report.write_csv(str(out / "strategy_scores.csv"))
    report.write_summary_csv(str(out / "strategy_summary.csv"))
    _write_run_manifest(out, args, env_cfg, seed)
    print(f"{spec.name}: mean score {report.overall_mean:.3f} "
          f"at {report.cost} tokens/row over {len(report.rows)} prompts")
    return 0


def cmd_compare(args) -> int:
    env_cfg, _, seed = _load_ctx(args)
    out = _outdir(args)
    critic_params = critic.load_params(args.critic)
    schedule = search.parse_schedule(args.schedule)
    guided = search.StrategySpec(kind="plan_critic", schedule=schedule)
    baseline = search.StrategySpec(kind="bon", n=args.bon_n, selector=args.bon_selector)
    prompts = data.sample_prompts(args.n_prompts, env_cfg, seed + 1)

    rg = search.evaluate_strategy(guided, prompts, env_cfg, seed, critic_params=critic_params)
    rb = search.evaluate_strategy(baseline, prompts, env_cfg, seed, critic_params=critic_params)
    pvalue = search.sign_test_pvalue(rg.scores, rb.scores)

    rows = [
        [pid, count, repr(gs), repr(bs)]
        for (pid, count, gs, _), (_, _, bs, _) in zip(rg.rows, rb.rows)
    ]
    _write_csv(out / "paired_scores.csv",
               ["prompt_id", "event_count", guided.name, baseline.name], rows)

    bg, bb = rg.bucket_means(), rb.bucket_means()
    buckets = sorted(set(bg) | set(bb))
    _write_csv(
        out / "compare_summary.csv",
        ["bucket", "n", f"{guided.name}_mean", f"{baseline.name}_mean", "gap"],
        [["overall", len(rg.rows), repr(rg.overall_mean), repr(rb.overall_mean),
          repr(rg.overall_mean - rb.overall_mean)]]
        + [[f"event@{c}", bg[c][0], repr(bg[c][1]), repr(bb[c][1]),
            repr(bg[c][1] - bb[c][1])] for c in buckets],
    )
    with open(out / "sign_test.json", "w") as f:
        json.dump(
            {
                "guided": guided.name, "baseline": baseline.name,
                "guided_mean": rg.overall_mean, "baseline_mean": rb.overall_mean,
                "one_sided_p": pvalue,
                "guided_cost": rg.cost, "baseline_cost": rb.cost,
            },
            f, sort_keys=True, indent=2,
        )
        f.write("\n")
    svg.render_lines(
        str(out / "compare_buckets.svg"),
        [
            (guided.name, buckets, [bg[c][1] for c in buckets]),
            (baseline.name, buckets, [bb[c][1] for c in buckets]),
        ],
        "score by event count", "event count", "mean score",
    )
    _write_run_manifest(out, args, env_cfg, seed)
    print(f"guided {rg.overall_mean:.3f} vs baseline {rb.overall_mean:.3f} "
          f"(one-sided sign test p={pvalue:.2e})")
    return 0


def cmd_postfix_variance(args) -> int:
    env_cfg, _, seed = _load_ctx(args)
    out = _outdir(args)
    rows, ratio = search.postfix_variance(
        args.prefixes, args.completions, env_cfg, seed, t_prefix=args.t_prefix
    )
    _write_csv(
        out / "postfix_variance.csv",
        ["prefix_id", "event_count", "mean_score", "std_score"],
        [[pid, c, repr(m), repr(s)] for pid, c, m, s in rows],
    )
    with open(out / "postfix_variance_summary.json", "w") as f:
        json.dump(
            {
                "n_prefixes": args.prefixes,
                "n_completions": args.completions,
                "median_per_prefix_std": float(np.median([r[3] for r in rows])),
                "std_of_per_prefix_means": float(np.std([r[2] for r in rows])),
                "ratio": ratio,
            },
            f, sort_keys=True, indent=2,
        )
        f.write("\n")
    svg.render_scatter(
        str(out / "postfix_variance.svg"),
        [r[2] for r in rows], [r[3] for r in rows],
        "per-prefix completion score spread", "mean score", "std of scores",
        groups=[r[1] for r in rows],
    )
    _write_run_manifest(out, args, env_cfg, seed)
    print(f"median per-prefix std / std of means = {ratio:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqcritic",
        description="Critic-guided sampling lab for synthetic token sequences.",
    )
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="runs/out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker cap for data collection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("budget", help="print the token cost of a schedule")
    p.add_argument("schedule", help='e.g. "32:128,288:2"')
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("gen-data", help="collect a scored rollout dataset")
    p.add_argument("--prompts", type=int, default=2000)
    p.add_argument("--rollouts", type=int, default=32)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-critic", help="train the value critic on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, help="override train_steps from the config")
    p.set_defaults(func=cmd_train_critic)

    p = sub.add_parser("probe", help="prefix probing studies on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--t-prefix", type=int)
    p.add_argument("--mode", choices=["histogram", "embedding"], default="histogram")
    p.add_argument("--critic", help="checkpoint (needed for embedding mode)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sample", help="run one sampling strategy over fresh prompts")
    p.add_argument("--strategy", choices=["blind", "bon", "plan_critic", "softmax"],
                   default="plan_critic")
    p.add_argument("--n", type=int, default=16, help="candidate count for bon")
    p.add_argument("--schedule", help='e.g. "8:128,64:2"')
    p.add_argument("--selector", choices=["oracle", "critic"], default="oracle")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--n-prompts", type=int, default=200)
    p.add_argument("--critic", help="checkpoint for critic-guided strategies")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compare", help="paired guided-vs-baseline study with a sign test")
    p.add_argument("--critic", required=True)
    p.add_argument("--schedule", default="8:128,64:2")
    p.add_argument("--bon-n", type=int, default=16)
    p.add_argument("--bon-selector", choices=["oracle", "critic"], default="critic")
    p.add_argument("--n-prompts", type=int, default=500)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("postfix-variance", help="per-prefix completion variance study")
    p.add_argument("--prefixes", type=int, default=200)
    p.add_argument("--completions", type=int, default=200)
    p.add_argument("--t-prefix", type=int)
    p.set_defaults(func=cmd_postfix_variance)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except critic.Diverged as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    except DATA_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
