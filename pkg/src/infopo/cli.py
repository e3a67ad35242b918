"""Command-line front end: train, ablate, verify, mask study, report.

Every subcommand resolves one validated config (file + repeated --set
overrides + --seed/--out flags), runs, and writes a manifest recording the
resolved config, the seed, and sha256 hashes of every artifact. Replaying a
subcommand with ``--config <manifest.json>`` reproduces the run-log bytes;
wall-clock timestamps live only in the manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .advantage import AblationMode
from .config import ConfigError, RunConfig, load_config
from .core import Vocab
from .diagnostics import (
    heatmap_to_csv,
    length_reward_correlation,
    mask_sensitivity,
    stability_metrics,
    turn_heatmap,
    zero_variance_buckets,
)
from .env import HiddenIntentTask
from .infogain import MaskStrategy
from .policy import PolicySpace, init_params, load_checkpoint, save_checkpoint
from .theory import TheoryCase, verify_theorem1, verify_theorem2
from .trainer import StepReport, train

ABLATE_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("no_gate", {"advantage.ablation": "no_gate"}),
    ("no_std", {"advantage.ablation": "no_std"}),
    ("no_ext", {"advantage.ablation": "no_ext"}),
    ("grpo", {"advantage.beta": 0.0}),
)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    artifacts = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[str(path.relative_to(out_dir))] = _sha256(path)
    manifest = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": cfg["seed"],
        "config": cfg.values,
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))


def _policy_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5, *key)))


def run_training(cfg: RunConfig, out_dir: Path) -> list[StepReport]:
    """Train per config, streaming the run log and checkpoints to disk."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    task = cfg.task()
    space = PolicySpace(vocab=cfg.vocab(), horizon=cfg["env.horizon"])
    params = init_params(
        space,
        _init_rng(cfg["seed"]),
        scale=cfg["policy.init_scale"],
        query_bias=cfg["policy.query_bias"],
    )

    log_path = out_dir / "run.log"
    with open(log_path, "w") as log:

        def on_report(report: StepReport) -> None:
            log.write(report.to_json() + "\n")

        def checkpoint_fn(iteration: int, policy) -> None:
            save_checkpoint(policy, ckpt_dir / f"ckpt_{iteration + 1}.bin")

        reports = train(
            task,
            params,
            cfg.trainer_config(),
            cfg.rollout_config(),
            cfg.gate_config(),
            cfg.mask_spec(),
            ablation=cfg.ablation(),
            epsilon=cfg["advantage.epsilon"],
            info_mode=cfg["infogain.mode"],
            on_report=on_report,
            checkpoint_fn=checkpoint_fn,
            checkpoint_every=cfg["trainer.checkpoint_every"],
        )
    return reports


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg["output_dir"])
    reports = run_training(cfg, out_dir)
    write_manifest(out_dir, "train", cfg)
    final_eval = [r.eval_success for r in reports if r.eval_success is not None]
    print(
        f"train: {len(reports)} iterations, final eval success "
        f"{final_eval[-1] if final_eval else float('nan'):.3f} -> {out_dir}"
    )
    return 0


def variant_label(config_values: dict) -> str:
    """Human label for a run: the ablation name, or full/grpo by beta."""
    ablation = config_values.get("advantage.ablation", "none")
    if ablation != "none":
        return ablation
    return "grpo" if config_values.get("advantage.beta", 0.5) == 0.0 else "full"


def cmd_ablate(cfg: RunConfig, n_seeds: int = 3) -> int:
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = cfg["seed"]
    summary: dict[str, dict] = {}
    for name, overrides in ABLATE_VARIANTS:
        finals, aucs = [], []
        for s in range(n_seeds):
            sub_dir = out_dir / f"{name}-s{base_seed + s}"
            sub_cfg = cfg.with_overrides(
                {**overrides, "seed": base_seed + s, "output_dir": str(sub_dir)}
            )
            reports = run_training(sub_cfg, sub_dir)
            write_manifest(sub_dir, "train", sub_cfg)
            evals = [r.eval_success for r in reports if r.eval_success is not None]
            finals.append(evals[-1])
            aucs.append(float(np.mean(evals)))
        summary[name] = {
            "final_per_seed": finals,
            "median_final": float(np.median(finals)),
            "auc_per_seed": aucs,
            "median_auc": float(np.median(aucs)),
        }
        print(
            f"ablate[{name}]: median final {summary[name]['median_final']:.3f}, "
            f"median AUC {summary[name]['median_auc']:.3f}"
        )
    (out_dir / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out_dir, "ablate", cfg)
    return 0


def _micro_and_default_cases() -> list[tuple[str, HiddenIntentTask]]:
    return [
        ("micro", HiddenIntentTask.binary(2, 1, horizon=2, task_id="micro")),
        ("default", HiddenIntentTask.binary(4, 2, horizon=3, task_id="default")),
        ("micro-noisy", HiddenIntentTask.binary(2, 1, noise=0.25, horizon=3, task_id="micro-noisy")),
    ]


def _random_policy(task: HiddenIntentTask, seed: int, *key: int, scale: float = 1.0):
    space = PolicySpace(vocab=task.vocab, horizon=task.horizon)
    return init_params(space, _policy_rng(seed, *key), scale=scale)


def _corrupted_obs_dist(task, posterior, attribute):
    from .env import observation_distribution_from_posterior

    dist = observation_distribution_from_posterior(task, posterior, attribute)
    vocab = task.vocab
    bumped = {k: v for k, v in dist.items()}
    key0 = (vocab.bit(0),)
    bumped[key0] = bumped[key0] + 0.01
    total = sum(bumped.values())
    return {k: v / total for k, v in bumped.items()}


def cmd_verify_theorem1(cfg: RunConfig) -> int:
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tol = cfg["theory.tol_mi"]
    n_policies = cfg["theory.n_policies_mi"]
    cases = []
    all_pass = True
    for case_idx, (name, task) in enumerate(_micro_and_default_cases()):
        worst = 0.0
        for i in range(n_policies):
            policy = _random_policy(task, cfg["seed"], case_idx, i)
            report = verify_theorem1(TheoryCase(task=task, policy=policy), tol=tol)
            worst = max(worst, report.max_abs_err)
            all_pass = all_pass and report.passed
        cases.append({"task": name, "n_policies": n_policies, "max_abs_err": worst})
        print(f"verify-theorem1[{name}]: {'PASS' if worst <= tol else 'FAIL'} "
              f"tol={tol:g} max_err={worst:.3e}")

    control_task = _micro_and_default_cases()[0][1]
    control_policy = _random_policy(control_task, cfg["seed"], 99, 0)
    control = verify_theorem1(
        TheoryCase(task=control_task, policy=control_policy),
        tol=tol,
        obs_dist_fn=_corrupted_obs_dist,
    )
    negative_ok = not control.passed
    print(
        "verify-theorem1[negative-control]: "
        + ("PASS (corruption detected)" if negative_ok else "FAIL (corruption slipped through)")
    )

    payload = {
        "tolerance": tol,
        "cases": cases,
        "negative_control_detected": negative_ok,
        "all_pass": bool(all_pass and negative_ok),
    }
    (out_dir / "theorem1_report.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest(out_dir, "verify-theorem1", cfg)
    return 0 if payload["all_pass"] else 1


def _theorem2_tasks() -> list[HiddenIntentTask]:
    return [
        HiddenIntentTask.binary(2, 1, horizon=3, task_id="m2"),
        HiddenIntentTask.binary(4, 2, horizon=3, task_id="m4"),
        HiddenIntentTask.binary(8, 3, horizon=3, task_id="m8"),
    ]


def _train_checkpoint(task: HiddenIntentTask, seed: int, iterations: int = 120):
    cfg = RunConfig.defaults().with_overrides(
        {
            "seed": seed,
            "env.M": task.n_intents,
            "env.K": task.n_attributes,
            "env.horizon": task.horizon,
            "trainer.iterations": iterations,
            "trainer.num_groups": 4,
            "trainer.eval_every": iterations,
            "trainer.eval_episodes": 8,
            "trainer.learning_rate": 2.0,
        }
    )
    space = PolicySpace(vocab=task.vocab, horizon=task.horizon)
    params = init_params(space, _init_rng(seed), scale=cfg["policy.init_scale"])
    train(
        task,
        params,
        cfg.trainer_config(),
        cfg.rollout_config(),
        cfg.gate_config(),
        cfg.mask_spec(),
    )
    return params


def cmd_verify_theorem2(cfg: RunConfig) -> int:
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    slack = cfg["theory.slack_fano"]
    tasks = _theorem2_tasks()
    n_random = cfg["theory.n_random"]
    per_task = max(1, n_random // len(tasks))
    violations = 0
    checked = 0
    worst_margin = math.inf
    for task_idx, task in enumerate(tasks):
        for i in range(per_task):
            policy = _random_policy(task, cfg["seed"], task_idx, i)
            report = verify_theorem2(TheoryCase(task=task, policy=policy), slack=slack)
            checked += 1
            worst_margin = min(
                worst_margin,
                report.detail["directed_info"] - report.detail["fano_bound"],
            )
            if not report.passed:
                violations += 1
    print(
        f"verify-theorem2[random x {checked}]: "
        f"{'PASS' if violations == 0 else 'FAIL'} worst margin {worst_margin:.3e}"
    )

    trained_specs = [
        (HiddenIntentTask.binary(2, 1, horizon=3, task_id="m2"), 0),
        (HiddenIntentTask.binary(2, 1, horizon=3, task_id="m2"), 1),
        (HiddenIntentTask.binary(4, 2, horizon=4, task_id="m4"), 0),
        (HiddenIntentTask.binary(4, 2, horizon=4, task_id="m4"), 1),
        (HiddenIntentTask.binary(8, 3, horizon=6, task_id="m8"), 0),
    ]
    trained_results = []
    for task, seed_offset in trained_specs:
        params = _train_checkpoint(task, cfg["seed"] + seed_offset)
        report = verify_theorem2(TheoryCase(task=task, policy=params), slack=slack)
        trained_results.append(
            {
                "task": task.task_id,
                "n_intents": task.n_intents,
                "success_prob": report.detail["success_prob"],
                "directed_info": report.detail["directed_info"],
                "fano_bound": report.detail["fano_bound"],
                "passed": report.passed,
            }
        )
        if not report.passed:
            violations += 1
        print(
            f"verify-theorem2[trained {task.task_id}]: "
            f"{'PASS' if report.passed else 'FAIL'} "
            f"success={report.detail['success_prob']:.3f} "
            f"info={report.detail['directed_info']:.4f} >= bound={report.detail['fano_bound']:.4f}"
        )

    payload = {
        "slack": slack,
        "random_policies_checked": checked,
        "violations": violations,
        "worst_random_margin": worst_margin,
        "trained": trained_results,
        "all_pass": violations == 0,
    }
    (out_dir / "theorem2_report.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest(out_dir, "verify-theorem2", cfg)
    return 0 if violations == 0 else 1


def cmd_mask_sensitivity(cfg: RunConfig, checkpoint: str | None) -> int:
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    task = cfg.task()
    space = PolicySpace(vocab=cfg.vocab(), horizon=cfg["env.horizon"])
    if checkpoint:
        params = load_checkpoint(checkpoint, space)
    else:
        train_dir = out_dir / "trained"
        params_cfg = cfg.with_overrides({"output_dir": str(train_dir)})
        run_training(params_cfg, train_dir)
        params = load_checkpoint(
            sorted((train_dir / "checkpoints").glob("ckpt_*.bin"))[-1], space
        )
    result = mask_sensitivity(
        task,
        params,
        strategies=[s.value for s in MaskStrategy],
        n_turns=cfg["diagnostics.mask_turns"],
        baseline=cfg["infogain.mask"],
        seed=cfg["seed"],
        include_marginal=True,
    )
    payload = {
        "baseline": result["baseline"],
        "n_turns": result["n_turns"],
        "max_relative_gap": result["max_relative_gap"],
        "strategies": [
            {
                "strategy": s.strategy,
                "mean": s.mean,
                "median": s.median,
                "iqr": s.iqr,
                "relative_gap": s.relative_gap,
                "t_test_p": s.t_test_p,
                "mann_whitney_p": s.mann_whitney_p,
            }
            for s in result["strategies"]
        ],
        "exact_marginal": result.get("exact_marginal"),
    }
    (out_dir / "mask_sensitivity.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest(out_dir, "mask-sensitivity", cfg)
    for entry in payload["strategies"]:
        print(
            f"mask[{entry['strategy']}]: mean={entry['mean']:.4f} "
            f"gap={entry['relative_gap']:.2%}"
        )
    print(f"mask-sensitivity: max relative gap {payload['max_relative_gap']:.2%}")
    return 0


def _load_runs(in_dir: Path) -> list[tuple[dict, list[StepReport]]]:
    """(manifest config, reports) for every run.log under ``in_dir``."""
    runs = []
    candidates = [in_dir] + sorted(p for p in in_dir.iterdir() if p.is_dir())
    for cand in candidates:
        log = cand / "run.log"
        if not log.exists():
            continue
        manifest_path = cand / "manifest.json"
        config = {}
        if manifest_path.exists():
            config = json.loads(manifest_path.read_text()).get("config", {})
        reports = [StepReport.from_json(line) for line in log.read_text().splitlines() if line]
        runs.append((config, reports))
    return runs


def cmd_report(cfg: RunConfig, in_dir: str) -> int:
    source = Path(in_dir)
    if not source.exists():
        raise ConfigError(f"report input directory not found: {source}")
    runs = _load_runs(source)
    if not runs:
        raise ConfigError(f"no run.log found under {source}")
    out_dir = Path(cfg["output_dir"])
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)

    by_label: dict[str, list[list[StepReport]]] = {}
    for config, reports in runs:
        by_label.setdefault(variant_label(config), []).append(reports)

    stability_lines = ["label,j_final,delta_bf,p_collapse"]
    zero_var_lines = ["label,bucket,fraction"]
    corr_lines = ["label,rho,defined"]
    summary: dict[str, dict] = {}
    for label, series in sorted(by_label.items()):
        metrics = stability_metrics(series, alpha=0.5)
        stability_lines.append(
            f"{label},{metrics.j_final!r},{metrics.delta_bf!r},{metrics.p_collapse!r}"
        )
        buckets = zero_variance_buckets(
            series[0], phase_fraction=cfg["diagnostics.initial_phase_fraction"]
        )
        for b, frac in enumerate(buckets):
            zero_var_lines.append(f"{label},{b},{frac!r}")
        lengths = [l for reports in series for r in reports for l in r.episode_action_lens]
        rewards = [w for reports in series for r in reports for w in r.episode_rewards]
        rho, defined = length_reward_correlation(lengths, rewards)
        corr_lines.append(f"{label},{'' if rho is None else repr(rho)},{defined}")

        heatmap = turn_heatmap(series, n_buckets=cfg["diagnostics.heatmap_buckets"])
        (metrics_dir / f"heatmap_{label}.csv").write_text(heatmap_to_csv(heatmap))
        summary[label] = {
            "n_seeds": len(series),
            "j_final": metrics.j_final,
            "delta_bf": metrics.delta_bf,
            "p_collapse": metrics.p_collapse,
            "zero_variance_buckets": buckets,
            "length_reward_rho": rho,
        }
    if len(by_label) == 1:
        label = next(iter(by_label))
        heatmap = turn_heatmap(by_label[label], n_buckets=cfg["diagnostics.heatmap_buckets"])
        (metrics_dir / "heatmap.csv").write_text(heatmap_to_csv(heatmap))

    (metrics_dir / "stability.csv").write_text("\n".join(stability_lines) + "\n")
    (metrics_dir / "zero_variance.csv").write_text("\n".join(zero_var_lines) + "\n")
    (metrics_dir / "length_reward.csv").write_text("\n".join(corr_lines) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out_dir, "report", cfg)
    print(f"report: {len(runs)} runs, {len(by_label)} variants -> {metrics_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infopo",
        description="Train and analyze info-gain-fused group-relative policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (
        "train",
        "ablate",
        "verify-theorem1",
        "verify-theorem2",
        "mask-sensitivity",
        "report",
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file or a manifest.json")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name == "mask-sensitivity":
            p.add_argument("--checkpoint", default=None, help="policy checkpoint to analyze")
        if name == "report":
            p.add_argument("--in", dest="in_dir", required=True, help="directory of run outputs")
    return parser


def _resolve_config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.config, overrides)
    post: dict = {}
    if args.seed is not None:
        post["seed"] = args.seed
    if args.out is not None:
        post["output_dir"] = args.out
    return cfg.with_overrides(post) if post else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "verify-theorem1":
            return cmd_verify_theorem1(cfg)
        if args.command == "verify-theorem2":
            return cmd_verify_theorem2(cfg)
        if args.command == "mask-sensitivity":
            return cmd_mask_sensitivity(cfg, args.checkpoint)
        if args.command == "report":
            return cmd_report(cfg, args.in_dir)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
