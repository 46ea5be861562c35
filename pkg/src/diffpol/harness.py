"""Experiment orchestration: runs, sweeps, plots, method comparisons.

Every run directory is self-describing: it holds the fully resolved
config.json, an incrementally written metrics.csv (schema v1), and the
latest actor checkpoint (checkpoint.bin plus its .json layout header), so
any run can be reproduced or replotted from its own outputs alone.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from . import algos, envs
from .algos import AlgoConfig, RUNLOG_COLUMNS, TrainingDiverged, train
from .config import (
    STREAM_DEMOS,
    STREAM_FINETUNE,
    STREAM_PRETRAIN,
    ConfigError,
    ExperimentConfig,
    seed_stream,
)
from .nets import load_params, save_params
from .policy import (
    AffineMap,
    DemoDataset,
    DiffusionPolicy,
    Normalization,
    load_demos,
    make_policy,
    pretrain_bc,
    save_demos,
)
from .rl import make_critics

METRICS_SCHEMA_VERSION = 1

PRIMARY_METRIC = {"pointmass": "avg_reward", "reacher2goal": "success_rate"}


def primary_metric(env_name: str) -> str:
    return PRIMARY_METRIC.get(env_name, "avg_reward")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_policy_checkpoint(bin_path, policy: DiffusionPolicy) -> None:
    extra = {
        "obs_dim": policy.obs_dim,
        "action_dim": policy.action_dim,
        "hidden": list(policy.net.spec.hidden),
        "activation": policy.net.spec.activation,
        "time_dim": policy.net.embed.dim,
        "T": policy.sched.T,
        "beta_min": float(policy.sched.beta[0]),
        "beta_max": float(policy.sched.beta[-1]),
    }
    if policy.norm is not None:
        extra["norm"] = {
            "obs_lo": policy.norm.obs.lo.tolist(),
            "obs_hi": policy.norm.obs.hi.tolist(),
            "act_lo": policy.norm.act.lo.tolist(),
            "act_hi": policy.norm.act.hi.tolist(),
        }
    save_params(bin_path, policy.params, extra)


def load_policy_checkpoint(bin_path) -> DiffusionPolicy:
    params, extra = load_params(bin_path)
    policy = make_policy(
        extra["obs_dim"],
        extra["action_dim"],
        hidden=tuple(extra["hidden"]),
        T=extra["T"],
        time_dim=extra["time_dim"],
        beta_min=extra["beta_min"],
        beta_max=extra["beta_max"],
        activation=extra["activation"],
    )
    norm = None
    if "norm" in extra:
        n = extra["norm"]
        norm = Normalization(
            AffineMap(np.array(n["obs_lo"]), np.array(n["obs_hi"])),
            AffineMap(np.array(n["act_lo"]), np.array(n["act_hi"])),
        )
    return dataclasses.replace(policy, params=params, norm=norm)


# --------------------------------------------------------------------------
# single-seed pipeline
# --------------------------------------------------------------------------


def build_demos(cfg: ExperimentConfig, seed: int) -> DemoDataset:
    if cfg.demos:
        return load_demos(cfg.demos)
    env = envs.make_env(cfg.env, seed_stream(seed, STREAM_DEMOS))
    expert = envs.make_expert(cfg.env, cfg.demo_noise)
    return envs.gen_demos(env, expert, cfg.demo_episodes, seed_stream(seed, STREAM_DEMOS))


def build_pretrained_policy(cfg: ExperimentConfig, seed: int) -> DiffusionPolicy:
    if cfg.checkpoint:
        return load_policy_checkpoint(cfg.checkpoint)
    data = build_demos(cfg, seed)
    spec = envs.env_spec(cfg.env)
    policy = make_policy(
        spec.obs_dim,
        spec.act_dim,
        hidden=tuple(cfg.hidden),
        T=cfg.denoise_steps,
        time_dim=cfg.time_dim,
        beta_min=cfg.beta_min,
        beta_max=cfg.beta_max,
        seed=seed,
    )
    policy, _ = pretrain_bc(
        policy,
        data,
        cfg.pretrain_hyper(),
        cfg.pretrain_iters,
        cfg.pretrain_batch,
        seed_stream(seed, STREAM_PRETRAIN),
        eta_min=cfg.pretrain_lr_min,
    )
    return policy


def run_single_seed(cfg: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    """Pretrain (or load) and fine-tune one seed, writing all artifacts."""
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["seed"] = seed
    resolved["metrics_schema"] = METRICS_SCHEMA_VERSION
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    policy = build_pretrained_policy(cfg, seed)
    save_policy_checkpoint(run_dir / "checkpoint.bin", policy)

    spec = envs.env_spec(cfg.env)
    algo_cfg = cfg.algo_config()
    critics = make_critics(
        cfg.method,
        spec.obs_dim,
        spec.act_dim,
        hidden=tuple(cfg.critic_hidden),
        polyak_tau=cfg.polyak_tau,
        seed=seed + 1,
    )

    metrics_path = run_dir / "metrics.csv"
    status = {"seed": seed, "completed": True, "error": ""}
    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUNLOG_COLUMNS)

        def on_row(row, policy_now, _critics):
            writer.writerow([_fmt(v) for v in row])
            fh.flush()
            save_policy_checkpoint(run_dir / "checkpoint.bin", policy_now)

        try:
            train(
                lambda s: envs.make_env(cfg.env, s),
                policy,
                critics,
                algo_cfg,
                cfg.actor_hyper(),
                cfg.critic_hyper(),
                seed_stream(seed, STREAM_FINETUNE),
                on_row=on_row,
            )
        except TrainingDiverged as exc:
            status["completed"] = False
            status["error"] = str(exc)
    (run_dir / "status.json").write_text(json.dumps(status))
    return status


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _require_env(cfg: ExperimentConfig) -> None:
    if not cfg.env:
        raise ConfigError("missing environment name (--env or config 'env')")
    envs.env_spec(cfg.env)


def cmd_run(cfg: ExperimentConfig) -> int:
    _require_env(cfg)
    base = Path(cfg.out) / cfg.resolved_name()
    ok = True
    for seed in cfg.seeds:
        status = run_single_seed(cfg, seed, base / f"seed{seed}")
        if not status["completed"]:
            print(f"seed {seed}: aborted ({status['error']}); last checkpoint kept")
            ok = False
    print(f"run artifacts in {base}")
    return 0 if ok else 1


def cmd_gen_demos(cfg: ExperimentConfig) -> int:
    _require_env(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    data = build_demos(cfg, seed)
    path = out / f"{cfg.env}_demos.csv"
    save_demos(path, data)
    print(f"wrote {data.n} demo rows to {path}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    _require_env(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    data = build_demos(cfg, seed)
    save_demos(out / f"{cfg.env}_demos.csv", data)
    spec = envs.env_spec(cfg.env)
    policy = make_policy(
        spec.obs_dim,
        spec.act_dim,
        hidden=tuple(cfg.hidden),
        T=cfg.denoise_steps,
        time_dim=cfg.time_dim,
        beta_min=cfg.beta_min,
        beta_max=cfg.beta_max,
        seed=seed,
    )
    policy, losses = pretrain_bc(
        policy,
        data,
        cfg.pretrain_hyper(),
        cfg.pretrain_iters,
        cfg.pretrain_batch,
        seed_stream(seed, STREAM_PRETRAIN),
        eta_min=cfg.pretrain_lr_min,
    )
    path = out / f"{cfg.env}_pretrained.bin"
    save_policy_checkpoint(path, policy)
    print(f"pretrained for {cfg.pretrain_iters} iters, final loss {losses[-1]:.5f}")
    print(f"checkpoint at {path}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, param: str, values: list[str]) -> int:
    _require_env(cfg)
    if not values:
        raise ConfigError("sweep needs a non-empty --values list")
    if not hasattr(cfg, param) or param in ("seeds", "out", "run_name"):
        raise ConfigError(f"cannot sweep over {param!r}")

    from .config import _coerce  # same coercion as config layering

    summary_rows = []
    metric = primary_metric(cfg.env)
    for raw in values:
        value = _coerce(param, raw)
        sub = dataclasses.replace(cfg, **{param: value})
        sub.run_name = f"{cfg.resolved_name()}_{param}={raw}"
        cmd_run(sub)
        finals = collect_final_metrics(Path(sub.out) / sub.run_name, metric)
        summary_rows.append(
            (raw, float(np.mean(finals)), float(np.std(finals)), len(finals))
        )

    out = Path(cfg.out) / f"{cfg.resolved_name()}_sweep_{param}.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([param, f"final_{metric}_mean", f"final_{metric}_std", "seeds"])
        for row in summary_rows:
            writer.writerow(row)
    print(f"{param:>12}  final {metric} (mean +- std over seeds)")
    for raw, mean, std, n in summary_rows:
        print(f"{raw:>12}  {mean:.4f} +- {std:.4f}  ({n} seeds)")
    print(f"summary at {out}")
    return 0


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def seed_metric_curves(run_dir: Path, metric: str) -> list[np.ndarray]:
    curves = []
    for seed_dir in sorted(run_dir.glob("seed*")):
        path = seed_dir / "metrics.csv"
        if not path.exists():
            continue
        table = read_metrics(path)
        if metric in table and table[metric].size:
            curves.append(table[metric])
    return curves


def collect_final_metrics(run_dir: Path, metric: str) -> list[float]:
    return [float(curve[-1]) for curve in seed_metric_curves(run_dir, metric)]


def aggregate_curves(curves: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration mean and std over however many seeds reached it."""
    length = max(len(c) for c in curves)
    mean = np.empty(length)
    std = np.empty(length)
    for i in range(length):
        vals = [c[i] for c in curves if len(c) > i]
        mean[i] = np.mean(vals)
        std[i] = np.std(vals)
    return mean, std


def cmd_plot(run_dirs: list[str], out: str = "plots") -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = ("avg_reward", "success_rate", "actor_loss", "critic_loss")

    per_dir: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    for raw in run_dirs:
        run_dir = Path(raw)
        agg: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for metric in metrics:
            curves = seed_metric_curves(run_dir, metric)
            if curves:
                agg[metric] = aggregate_curves(curves)
        if not agg:
            print(f"warning: no metrics found under {run_dir}")
            continue
        per_dir[run_dir.name] = agg
        with (run_dir / "aggregate.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            names = [m for m in metrics if m in agg]
            writer.writerow(
                ["iteration"] + [f"{m}_{s}" for m in names for s in ("mean", "std")]
            )
            length = max(len(agg[m][0]) for m in names)
            for i in range(length):
                row = [i]
                for m in names:
                    mean, std = agg[m]
                    row += [_fmt(mean[i]), _fmt(std[i])] if i < len(mean) else ["", ""]
                writer.writerow(row)

    for metric in metrics:
        if not any(metric in agg for agg in per_dir.values()):
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, agg in per_dir.items():
            if metric not in agg:
                continue
            mean, std = agg[metric]
            x = np.arange(len(mean))
            ax.plot(x, mean, label=name)
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / f"{metric}.svg")
        plt.close(fig)
    print(f"plots in {out_dir}")
    return 0


def compare_verdict(base_vals, variant_vals) -> str:
    """Y / - / N by whether the variant beats the base by > one pooled SE."""
    base = np.asarray(base_vals, dtype=np.float64)
    var = np.asarray(variant_vals, dtype=np.float64)
    diff = var.mean() - base.mean()
    se = 0.0
    if base.size > 1 or var.size > 1:
        se = float(
            np.sqrt(
                (base.var(ddof=1) / base.size if base.size > 1 else 0.0)
                + (var.var(ddof=1) / var.size if var.size > 1 else 0.0)
            )
        )
    if diff > se:
        return "Y"
    if diff < -se:
        return "N"
    return "-"


def cmd_compare(methods: list[str], env: str, root: str, out: str | None = None) -> int:
    envs.env_spec(env)
    metric = primary_metric(env)
    root_dir = Path(root)
    rows = []
    for method in methods:
        base_dir = root_dir / f"{env}_{method}_adamw"
        var_dir = root_dir / f"{env}_{method}_adapg"
        base = collect_final_metrics(base_dir, metric)
        variant = collect_final_metrics(var_dir, metric)
        if not base or not variant:
            rows.append((method, float("nan"), float("nan"), "?"))
            continue
        rows.append(
            (
                method,
                float(np.mean(base)),
                float(np.mean(variant)),
                compare_verdict(base, variant),
            )
        )
    print(f"{'method':>8}  {'adamw':>10}  {'adapg':>10}  verdict  (final {metric})")
    for method, b, v, verdict in rows:
        print(f"{method:>8}  {b:>10.4f}  {v:>10.4f}  {verdict:>7}")
    out_path = Path(out) if out else root_dir / f"compare_{env}.csv"
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", f"adamw_final_{metric}", f"adapg_final_{metric}", "verdict"])
        for row in rows:
            writer.writerow(row)
    print(f"table at {out_path}")
    return 0
