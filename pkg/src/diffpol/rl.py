"""Shared MDP plumbing: transitions, replay buffer, returns, critic targets.

The loss helpers return (value, upstream-gradient) pairs; callers push the
upstream through the relevant network with mlp_backward. Everything accepts
scalars or aligned 1-D arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddpm import DenoiseChain
from .nets import MlpNet, ParamVector, make_net


@dataclass
class Transition:
    """One environment step in normalized policy space."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    chain: DenoiseChain | None = None
    logprob: float | None = None
    rtg: float | None = None
    rollout_id: int = 0


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform no-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
            self._next = (self._next + 1) % self.capacity

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.add(tr)

    def clear(self) -> None:
        self._items = []
        self._next = 0

    def as_list(self) -> list[Transition]:
        """Chronological order, oldest first."""
        return self._items[self._next :] + self._items[: self._next]

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        k = min(int(batch), len(self._items))
        return rng.choice(len(self._items), size=k, replace=False)

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        return [self._items[i] for i in self.sample_indices(batch, rng)]


@dataclass
class CriticEnsemble:
    """Value and/or double-Q networks with polyak-tracked target copies."""

    v: MlpNet | None = None
    q1: MlpNet | None = None
    q2: MlpNet | None = None
    q1_target: ParamVector | None = None
    q2_target: ParamVector | None = None
    polyak_tau: float = 0.005

    def __post_init__(self):
        if not 0 < self.polyak_tau <= 1:
            raise ValueError("polyak_tau must be in (0, 1]")

    def update_targets(self) -> None:
        if self.q1 is not None and self.q1_target is not None:
            self.q1_target = polyak_update(self.q1_target, self.q1.params, self.polyak_tau)
        if self.q2 is not None and self.q2_target is not None:
            self.q2_target = polyak_update(self.q2_target, self.q2.params, self.polyak_tau)


def make_critics(
    method: str,
    obs_dim: int,
    act_dim: int,
    hidden=(64, 64),
    polyak_tau: float = 0.005,
    seed: int = 0,
) -> CriticEnsemble:
    """Critic set matching a fine-tuning method's needs.

    dppo/dawr: V only. dipo: one Q plus target. dql/qsm: double Q plus
    targets. idql: double Q plus targets plus V.
    """
    rng = np.random.default_rng(seed)

    def _v():
        return make_net(obs_dim, hidden, 1, "tanh", rng)

    def _q():
        return make_net(obs_dim + act_dim, hidden, 1, "tanh", rng)

    ens = CriticEnsemble(polyak_tau=polyak_tau)
    if method in ("dppo", "dawr"):
        ens.v = _v()
    elif method == "dipo":
        ens.q1 = _q()
        ens.q1_target = ens.q1.params.copy()
    elif method in ("dql", "qsm"):
        ens.q1 = _q()
        ens.q2 = _q()
        ens.q1_target = ens.q1.params.copy()
        ens.q2_target = ens.q2.params.copy()
    elif method == "idql":
        ens.q1 = _q()
        ens.q2 = _q()
        ens.q1_target = ens.q1.params.copy()
        ens.q2_target = ens.q2.params.copy()
        ens.v = _v()
    else:
        raise ValueError(f"unknown method {method!r}")
    return ens


def episode_return(rewards, gamma: float) -> float:
    """Discounted sum of a reward sequence."""
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.dot(rewards, gamma ** np.arange(rewards.size)))


def reward_to_go(rewards, gamma: float) -> np.ndarray:
    """Discounted suffix sums; entry k is the return from step k on."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for k in range(rewards.size - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def advantage(reward_to_go, v_hat, gamma_denoise: float):
    """Denoise-discounted residual: gamma_denoise * (R - V_hat)."""
    if not 0 < gamma_denoise < 1:
        raise ValueError(f"gamma_denoise must be in (0, 1), got {gamma_denoise}")
    return gamma_denoise * (np.asarray(reward_to_go, dtype=np.float64) - np.asarray(v_hat, dtype=np.float64))


def value_loss(v_pred, v_target):
    """Mean squared error and its upstream gradient w.r.t. the predictions."""
    v_pred = np.atleast_1d(np.asarray(v_pred, dtype=np.float64))
    v_target = np.atleast_1d(np.asarray(v_target, dtype=np.float64))
    if v_pred.shape != v_target.shape:
        raise ValueError("prediction/target shapes differ")
    diff = v_pred - v_target
    loss = float(np.mean(diff**2))
    return loss, 2.0 * diff / diff.size


def double_q_target(r, done, q1t, q2t, gamma: float):
    """Bootstrap target r + (1 - done) * gamma * min(q1t, q2t)."""
    r = np.asarray(r, dtype=np.float64)
    mask = 1.0 - np.asarray(done, dtype=np.float64)
    return r + mask * gamma * np.minimum(q1t, q2t)


def expectile_value_loss(q, v, tau: float):
    """Squared gap between tau and the (Q < V) indicator, as written.

    The indicator has no derivative; the V gradient follows the standard
    asymmetric-quadratic convention 2 * |tau - ind| * (V - Q), treating the
    indicator as fixed within the batch.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    ind = (q < v).astype(np.float64)
    loss = float(np.mean((tau - ind) ** 2))
    grad_v = 2.0 * np.abs(tau - ind) * (v - q) / q.size
    return loss, grad_v


def v_bellman_q_loss(r, v_next, q, gamma: float):
    """Squared residual (r + gamma * v_next - q) and its Q upstream."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    v_next = np.atleast_1d(np.asarray(v_next, dtype=np.float64))
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    resid = r + gamma * v_next - q
    loss = float(np.mean(resid**2))
    return loss, -2.0 * resid / resid.size


def polyak_update(target: ParamVector, online: ParamVector, tau: float) -> ParamVector:
    """target' = (1 - tau) * target + tau * online."""
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    target._check_same_layout(online)
    return target.with_values((1.0 - tau) * target.values + tau * online.values)
