"""Flat experiment configuration with file / CLI / env-var layering.

Precedence, lowest to highest: dataclass defaults, then the JSON config
file, then CLI flags, then environment variables prefixed ``DIFFPOL_``.
Unknown keys are rejected by name at every layer.

Seed handling: the per-run random stream for (seed, purpose) is
``np.random.default_rng(np.random.SeedSequence([seed, purpose]))`` where
purpose is 0 for demo generation, 1 for pretraining, 2 for fine-tuning.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .algos import AlgoConfig
from .optim import OptimHyper

ENV_PREFIX = "DIFFPOL_"

STREAM_DEMOS = 0
STREAM_PRETRAIN = 1
STREAM_FINETUNE = 2


class ConfigError(ValueError):
    pass


def seed_stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose)]))


@dataclass
class ExperimentConfig:
    # experiment identity
    env: str = ""
    method: str = "dppo"
    optimizer: str = "adamw"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    run_name: str = ""

    # fine-tuning loop
    clip_eps: float = 0.2
    gamma: float = 0.99
    gamma_denoise: float = 0.99
    eta_dipo: float = 0.03
    eta_dql: float = 1.0
    alpha_qsm: float = 10.0
    tau_idql: float = 0.7
    n_action_samples: int = 10
    num_batch: int = 10
    batch_size: int = 64
    n_steps: int = 400
    n_iters: int = 50
    n_envs: int = 4
    action_grad_steps: int = 10
    polyak_tau: float = 0.005
    buffer_capacity: int = 20000
    grad_clip: float = 10.0
    normalize_adv: bool = True
    full_chain_grad: bool = False

    # optimizer hyperparameters
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 1e-6
    interp_lambda: float = 0.5
    omega: float = 1.0

    # policy architecture
    denoise_steps: int = 20
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    critic_hidden: list[int] = field(default_factory=lambda: [64, 64])
    time_dim: int = 8
    beta_min: float = 1e-4
    beta_max: float = 0.02

    # pretraining protocol
    demo_episodes: int = 150
    demo_noise: float = 0.15
    pretrain_iters: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_lr_min: float = 1e-4
    pretrain_batch: int = 128
    pretrain_weight_decay: float = 1e-6

    # optional inputs
    demos: str = ""
    checkpoint: str = ""

    def resolved_name(self) -> str:
        return self.run_name or f"{self.env}_{self.method}_{self.optimizer}"

    def algo_config(self) -> AlgoConfig:
        keys = {f.name for f in fields(AlgoConfig)}
        values = {k: v for k, v in dataclasses.asdict(self).items() if k in keys}
        return AlgoConfig(**values)

    def actor_hyper(self) -> OptimHyper:
        return self._hyper(self.actor_lr)

    def critic_hyper(self) -> OptimHyper:
        return self._hyper(self.critic_lr)

    def pretrain_hyper(self) -> OptimHyper:
        return OptimHyper(
            eta=self.pretrain_lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=1e-8,
            weight_decay_lambda=self.pretrain_weight_decay,
        )

    def _hyper(self, lr: float) -> OptimHyper:
        return OptimHyper(
            eta=lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps_opt,
            weight_decay_lambda=self.weight_decay,
            interp_lambda=self.interp_lambda,
            omega=self.omega,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    """Coerce a string (or JSON value) to the field's declared type."""
    f = _FIELDS[name]
    origin = f.type
    if origin in ("list[int]", list[int]):
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        return [int(v) for v in value]
    if origin in ("bool", bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for {name!r}: {value!r}")
    if origin in ("int", int):
        return int(value)
    if origin in ("float", float):
        return float(value)
    return str(value)


def _apply(cfg_dict: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        try:
            cfg_dict[key] = _coerce(key, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r} (from {source}): {exc}") from exc


def resolve_config(
    config_path: str | None = None,
    cli_overrides: dict | None = None,
    environ: dict | None = None,
) -> ExperimentConfig:
    """Layer defaults <- file <- CLI <- DIFFPOL_* environment variables."""
    cfg_dict = dataclasses.asdict(ExperimentConfig())
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        _apply(cfg_dict, data, str(path))
    if cli_overrides:
        _apply(cfg_dict, cli_overrides, "command line")
    environ = os.environ if environ is None else environ
    env_updates = {
        key[len(ENV_PREFIX) :].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }
    _apply(cfg_dict, env_updates, "environment")
    return ExperimentConfig(**cfg_dict)
