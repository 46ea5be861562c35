"""Conditional diffusion policy: action sampling and behavior cloning.

The policy operates entirely in normalized space: observations and actions
are mapped per-dimension into [-1, 1] by affine maps built from the
demonstration data. Sampled actions are clamped to [-1, 1] after the final
denoise step; log-densities are evaluated on the pre-clamp chain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ddpm
from .ddpm import DenoiseChain, EpsilonNet, NoiseSchedule, make_epsilon_net, make_schedule
from .nets import ParamVector, ShapeError, init_mlp_params
from .optim import OptimHyper, adamw_step, init_state


@dataclass(frozen=True)
class AffineMap:
    """Per-dimension affine map between raw space and [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ShapeError("lo/hi must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise ValueError("hi must be >= lo")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_data(cls, data: np.ndarray) -> "AffineMap":
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        return cls(data.min(axis=0), data.max(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(-np.ones(dim), np.ones(dim))


def normalize(x, m: AffineMap) -> np.ndarray:
    """Map raw coordinates into [-1, 1]; constant dimensions go to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = m.hi - m.lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out = 2.0 * (x - m.lo) / span - 1.0
    return np.where(span > 0, out, 0.0)


def denormalize(x, m: AffineMap) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = m.hi - m.lo
    return np.where(span > 0, m.lo + (x + 1.0) * span / 2.0, m.lo)


@dataclass(frozen=True)
class Normalization:
    obs: AffineMap
    act: AffineMap


@dataclass(frozen=True)
class DemoDataset:
    """Paired observation/action matrices, stored normalized to [-1, 1]."""

    observations: np.ndarray
    actions: np.ndarray
    norm: Normalization

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        act = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if obs.shape[0] != act.shape[0]:
            raise ShapeError("observations and actions must pair row for row")
        if obs.shape[0] == 0:
            raise ValueError("demo dataset is empty")
        for arr, name in ((obs, "observations"), (act, "actions")):
            if np.max(np.abs(arr)) > 1.0 + 1e-9:
                raise ValueError(f"normalized {name} fall outside [-1, 1]")
            arr.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)

    @classmethod
    def from_raw(cls, observations, actions) -> "DemoDataset":
        """Build maps from the data's min/max and store normalized copies."""
        observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if observations.shape[0] == 0:
            raise ValueError("demo dataset is empty")
        norm = Normalization(
            AffineMap.from_data(observations), AffineMap.from_data(actions)
        )
        return cls(normalize(observations, norm.obs), normalize(actions, norm.act), norm)

    @classmethod
    def from_normalized(cls, observations, actions) -> "DemoDataset":
        """Data already in [-1, 1]; identity maps."""
        observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        norm = Normalization(
            AffineMap.identity(observations.shape[1]),
            AffineMap.identity(actions.shape[1]),
        )
        return cls(observations, actions, norm)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]


def save_demos(csv_path, data: DemoDataset) -> None:
    """CSV of normalized rows (obs then action) plus a JSON map sidecar."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"obs{i}" for i in range(data.obs_dim)]
            + [f"act{i}" for i in range(data.act_dim)]
        )
        for o, a in zip(data.observations, data.actions):
            writer.writerow([repr(float(v)) for v in o] + [repr(float(v)) for v in a])
    sidecar = {
        "obs_dim": data.obs_dim,
        "act_dim": data.act_dim,
        "obs_lo": data.norm.obs.lo.tolist(),
        "obs_hi": data.norm.obs.hi.tolist(),
        "act_lo": data.norm.act.lo.tolist(),
        "act_hi": data.norm.act.hi.tolist(),
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_demos(csv_path) -> DemoDataset:
    csv_path = Path(csv_path)
    side = json.loads(csv_path.with_suffix(".json").read_text())
    rows = []
    with csv_path.open() as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append([float(v) for v in row])
    arr = np.asarray(rows, dtype=np.float64)
    obs_dim = int(side["obs_dim"])
    norm = Normalization(
        AffineMap(np.array(side["obs_lo"]), np.array(side["obs_hi"])),
        AffineMap(np.array(side["act_lo"]), np.array(side["act_hi"])),
    )
    return DemoDataset(arr[:, :obs_dim], arr[:, obs_dim:], norm)


@dataclass(frozen=True)
class DiffusionPolicy:
    """Noise-prediction network plus schedule; samples actions given a state."""

    net: EpsilonNet
    params: ParamVector
    sched: NoiseSchedule
    norm: Normalization | None = None

    @property
    def obs_dim(self) -> int:
        return self.net.obs_dim

    @property
    def action_dim(self) -> int:
        return self.net.action_dim

    def with_params(self, params: ParamVector) -> "DiffusionPolicy":
        return replace(self, params=params)


def make_policy(
    obs_dim: int,
    action_dim: int,
    hidden=(64, 64),
    T: int = 20,
    time_dim: int = 8,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    activation: str = "mish",
    seed: int = 0,
) -> DiffusionPolicy:
    net = make_epsilon_net(obs_dim, action_dim, hidden, time_dim, activation)
    params = init_mlp_params(net.spec, seed)
    return DiffusionPolicy(net, params, make_schedule(T, beta_min, beta_max))


def sample_action(
    policy: DiffusionPolicy, state, rng: np.random.Generator
) -> tuple[np.ndarray, DenoiseChain]:
    """Run the reverse chain for one state; action clamped to [-1, 1].

    The recorded chain keeps the pre-clamp trajectory for density work.
    """
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (policy.obs_dim,):
        raise ShapeError(f"state must have shape ({policy.obs_dim},)")
    chain = ddpm.sample_chain(policy.net, policy.params, state, policy.sched, rng)
    return np.clip(chain.final, -1.0, 1.0), chain


def sample_actions(
    policy: DiffusionPolicy, states: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, list[DenoiseChain]]:
    """Batched sampling, one action per state row (chains run in lockstep)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    chains = ddpm.sample_chain_batch(policy.net, policy.params, states, policy.sched, rng)
    actions = np.clip(np.stack([c.final for c in chains]), -1.0, 1.0)
    return actions, chains


def cosine_lr(eta_max: float, eta_min: float, k: int, total: int) -> float:
    if total <= 1:
        return eta_max
    frac = k / (total - 1)
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + np.cos(np.pi * frac))


def pretrain_bc(
    policy: DiffusionPolicy,
    data: DemoDataset,
    hp: OptimHyper,
    iters: int,
    batch: int,
    rng: np.random.Generator,
    eta_min: float | None = None,
) -> tuple[DiffusionPolicy, list[float]]:
    """Behavior cloning: minimize the denoising loss over demo minibatches.

    Learning rate follows a cosine decay from hp.eta down to ``eta_min``
    (a tenth of hp.eta unless given). Returns the trained policy (with the
    dataset's normalization attached) and the per-iteration loss trace.
    """
    if data.n == 0:
        raise ValueError("demo dataset is empty")
    if data.obs_dim != policy.obs_dim or data.act_dim != policy.action_dim:
        raise ShapeError("dataset dims do not match the policy")
    if eta_min is None:
        eta_min = hp.eta / 10.0

    params = policy.params
    state = init_state(params)
    losses: list[float] = []
    T = policy.sched.T
    for k in range(int(iters)):
        idx = rng.integers(0, data.n, size=batch)
        t = rng.integers(1, T + 1, size=batch)
        noise = rng.standard_normal((batch, data.act_dim))
        loss, grad = ddpm.ddpm_loss_and_grad(
            policy.net,
            params,
            data.actions[idx],
            data.observations[idx],
            t,
            noise,
            policy.sched,
        )
        losses.append(loss)
        step_hp = replace(hp, eta=cosine_lr(hp.eta, eta_min, k, int(iters)))
        state, params = adamw_step(state, params, grad, step_hp)
    return replace(policy, params=params, norm=data.norm), losses
