"""Denoising diffusion core: schedule, forward corruption, reverse sampling.

The reverse chain is parameterized by a noise-prediction MLP conditioned on
an observation vector and the step index. Per-step variances are fixed to
the schedule's beta, never learned. Recorded chains keep every mean,
variance and Gaussian draw so the chain's Gaussian log-density (and its
gradient w.r.t. the network parameters) can be evaluated after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nets import (
    MlpSpec,
    ParamVector,
    ShapeError,
    TimeEmbedding,
    mlp_backward,
    mlp_forward,
    time_embed,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class SamplingError(RuntimeError):
    """Reverse sampling aborted (non-finite network output)."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta and cumulative alpha-bar tables for T denoise steps."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1 or beta.shape != (self.T,) or alpha_bar.shape != (self.T,):
            raise ShapeError(f"schedule tables must have length T={self.T}")
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise ValueError("beta values must lie in (0, 1)")
        if not (np.all(alpha_bar > 0) and np.all(alpha_bar <= 1)):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if self.T > 1 and not np.all(np.diff(alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not np.allclose(alpha_bar, np.cumprod(1.0 - beta), rtol=0, atol=1e-12):
            raise ValueError("alpha_bar is not the cumulative product of (1 - beta)")
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta interpolation from beta_min to beta_max over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(T, beta, np.cumprod(1.0 - beta))


def q_sample(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` may be a scalar applied to every row or a per-row integer array
    matched against a batch of x0 rows.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    if np.ndim(t) == 0:
        abar = sched.alpha_bar[sched.check_t(t) - 1]
    else:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > sched.T):
            raise ValueError("step indices outside [1, T]")
        abar = sched.alpha_bar[t - 1][:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class EpsilonNet:
    """Noise-prediction network: input [obs | noisy action | time features]."""

    spec: MlpSpec
    embed: TimeEmbedding
    obs_dim: int
    action_dim: int

    def __post_init__(self):
        want = self.obs_dim + self.action_dim + self.embed.dim
        if self.spec.input_dim != want:
            raise ShapeError(
                f"spec input_dim {self.spec.input_dim} != obs+action+embed = {want}"
            )
        if self.spec.output_dim != self.action_dim:
            raise ShapeError("spec output_dim must equal action_dim")

    def build_input(self, x, cond, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if cond.shape != (x.shape[0], self.obs_dim):
            raise ShapeError(
                f"conditioning must be (n, {self.obs_dim}), got {cond.shape}"
            )
        temb = time_embed(t, self.embed)
        if temb.ndim == 1:
            temb = np.broadcast_to(temb, (x.shape[0], self.embed.dim))
        return np.concatenate([cond, x, temb], axis=1)

    def predict(self, params: ParamVector, x, cond, t) -> np.ndarray:
        """Predicted noise for x_t given conditioning; batched over rows."""
        single = np.asarray(x).ndim == 1
        out = mlp_forward(params, self.spec, self.build_input(x, cond, t))
        return out[0] if single else out


def make_epsilon_net(
    obs_dim: int,
    action_dim: int,
    hidden=(64, 64),
    time_dim: int = 8,
    activation: str = "mish",
) -> EpsilonNet:
    embed = TimeEmbedding(time_dim)
    spec = MlpSpec(obs_dim + action_dim + time_dim, tuple(hidden), action_dim, activation)
    return EpsilonNet(spec, embed, obs_dim, action_dim)


class DenoiseStep(NamedTuple):
    x_prev: np.ndarray
    mean: np.ndarray
    var: float
    noise: np.ndarray


def _posterior_mean(x_t, eps, t: int, sched: NoiseSchedule):
    beta = sched.beta[t - 1]
    abar = sched.alpha_bar[t - 1]
    return (x_t - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(1.0 - beta)


def p_sample_step(
    net: EpsilonNet,
    params: ParamVector,
    x_t,
    t: int,
    cond,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> DenoiseStep:
    """One reverse step x_t -> x_{t-1}; deterministic (no noise) at t=1.

    Works on a single vector or on (n, action_dim) batches sharing t.
    Returns the new state plus the mean, variance and noise draw so callers
    can record the chain.
    """
    t = sched.check_t(t)
    eps = net.predict(params, x_t, cond, t)
    if not np.all(np.isfinite(eps)):
        raise SamplingError(
            f"non-finite noise prediction at t={t} "
            f"(max |x_t| = {np.max(np.abs(x_t)):.3g})"
        )
    mean = _posterior_mean(np.asarray(x_t, dtype=np.float64), eps, t, sched)
    var = float(sched.beta[t - 1])
    noise = rng.standard_normal(mean.shape) if t > 1 else np.zeros_like(mean)
    return DenoiseStep(mean + np.sqrt(var) * noise, mean, var, noise)


@dataclass(frozen=True)
class DenoiseChain:
    """Recorded reverse trajectory x_T ... x_0 with per-step statistics.

    ``states`` has T+1 rows (row 0 is the initial Gaussian draw, row T the
    final denoised sample); ``means``, ``variances`` and ``noises`` describe
    the T transitions, ordered from t=T down to t=1.
    """

    states: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    noises: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        noises = np.asarray(self.noises, dtype=np.float64)
        T = means.shape[0]
        if states.shape != (T + 1, means.shape[1]) or noises.shape != means.shape:
            raise ShapeError("chain arrays have inconsistent shapes")
        if variances.shape != (T,):
            raise ShapeError("variances must have one entry per transition")
        for arr, name in ((states, "states"), (means, "means"),
                          (variances, "variances"), (noises, "noises")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def validate(self) -> None:
        recon = self.means + np.sqrt(self.variances)[:, None] * self.noises
        if not np.allclose(self.states[1:], recon, rtol=0, atol=1e-12):
            raise ValueError("chain states do not reconstruct from mean + noise")


def sample_chain(
    net: EpsilonNet,
    params: ParamVector,
    cond,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> DenoiseChain:
    """Run the full reverse chain from a standard-normal start, recording it."""
    x = rng.standard_normal(net.action_dim)
    states = [x]
    means, variances, noises = [], [], []
    for t in range(sched.T, 0, -1):
        step = p_sample_step(net, params, x, t, cond, sched, rng)
        x = step.x_prev
        states.append(x)
        means.append(step.mean)
        variances.append(step.var)
        noises.append(step.noise)
    return DenoiseChain(np.array(states), np.array(means), np.array(variances),
                        np.array(noises))


def sample_chain_batch(
    net: EpsilonNet,
    params: ParamVector,
    conds: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> list[DenoiseChain]:
    """Vectorized variant: one chain per conditioning row, stepped in lockstep."""
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    n = conds.shape[0]
    x = rng.standard_normal((n, net.action_dim))
    states = [x]
    means, variances, noises = [], [], []
    for t in range(sched.T, 0, -1):
        step = p_sample_step(net, params, x, t, conds, sched, rng)
        x = step.x_prev
        states.append(x)
        means.append(step.mean)
        variances.append(step.var)
        noises.append(step.noise)
    chains = []
    for b in range(n):
        chains.append(
            DenoiseChain(
                np.array([s[b] for s in states]),
                np.array([m[b] for m in means]),
                np.array(variances),
                np.array([z[b] for z in noises]),
            )
        )
    return chains


def ddpm_loss_and_grad(
    net: EpsilonNet,
    params: ParamVector,
    x0,
    cond,
    t,
    noise,
    sched: NoiseSchedule,
) -> tuple[float, ParamVector]:
    """Noise-prediction training loss and its parameter gradient.

    Single sample: squared error ||noise - eps_hat||^2. Batched inputs
    (rows of x0/cond/noise with per-row t) average the per-sample losses.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    noise = np.asarray(noise, dtype=np.float64)
    x_t = q_sample(x0, t, noise, sched)
    inputs = net.build_input(x_t, cond, t)
    eps = mlp_forward(params, net.spec, inputs)
    resid = eps - np.atleast_2d(noise)
    n_rows = resid.shape[0]
    loss = float(np.sum(resid**2) / n_rows)
    grad, _ = mlp_backward(params, net.spec, inputs, 2.0 * resid / n_rows)
    del single
    return loss, grad


def chain_logprob(chain: DenoiseChain, sched: NoiseSchedule) -> float:
    """Sum of per-step Gaussian log-densities of the recorded chain."""
    if chain.T != sched.T:
        raise ShapeError(f"chain has {chain.T} steps but schedule has {sched.T}")
    # row i is the transition at t = T - i; all t > 1 need positive variance
    if np.any(chain.variances[:-1] <= 0):
        raise ValueError("zero variance at a step with t > 1")
    if chain.variances[-1] <= 0:
        raise ValueError("variance must be positive to evaluate the density")
    d = chain.dim
    resid = chain.states[1:] - chain.means
    quad = np.sum(resid**2, axis=1) / (2.0 * chain.variances)
    norm = 0.5 * d * (LOG_2PI + np.log(chain.variances))
    return float(np.sum(-quad - norm))


class LogprobCache:
    """Forward-pass cache for differentiating chain log-densities.

    Holds the stacked network inputs and per-row residual scalings for a
    batch of chains so a single backward pass can produce
    ``sum_b w_b * d logprob_b / d params`` for any weight vector w.
    """

    def __init__(self, net, params, inputs, resid_over_var, mean_scale, n_chains, T):
        self.net = net
        self.params = params
        self.inputs = inputs
        self.resid_over_var = resid_over_var
        self.mean_scale = mean_scale
        self.n_chains = n_chains
        self.T = T

    def weighted_param_grad(self, weights) -> ParamVector:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.n_chains,):
            raise ShapeError(f"weights must have shape ({self.n_chains},)")
        per_row = np.repeat(weights, self.T)[:, None]
        upstream = per_row * self.resid_over_var * self.mean_scale[:, None]
        grad, _ = mlp_backward(self.params, self.net.spec, self.inputs, upstream)
        return grad


def chain_logprob_batch(
    net: EpsilonNet,
    params: ParamVector,
    conds: np.ndarray,
    chains: list[DenoiseChain],
    sched: NoiseSchedule,
) -> tuple[np.ndarray, LogprobCache]:
    """Log-density of each recorded chain under the given parameters.

    The chains' states are held fixed; the per-step means are recomputed
    with ``params``, which is what makes the result differentiable. Returns
    the log-probabilities and a cache for parameter gradients.
    """
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    B = len(chains)
    if conds.shape[0] != B:
        raise ShapeError("need one conditioning row per chain")
    T = sched.T
    d = net.action_dim
    ts = np.arange(T, 0, -1)

    inputs = np.empty((B * T, net.spec.input_dim))
    for b, chain in enumerate(chains):
        if chain.T != T:
            raise ShapeError("all chains must match the schedule length")
        inputs[b * T : (b + 1) * T] = net.build_input(
            chain.states[:-1], np.broadcast_to(conds[b], (T, net.obs_dim)), ts
        )
    eps = mlp_forward(params, net.spec, inputs)

    beta = sched.beta[ts - 1]
    abar = sched.alpha_bar[ts - 1]
    coef = beta / np.sqrt(1.0 - abar)
    root = np.sqrt(1.0 - beta)
    x_t = np.concatenate([c.states[:-1] for c in chains])
    x_prev = np.concatenate([c.states[1:] for c in chains])
    variances = np.concatenate([c.variances for c in chains])
    if np.any(variances <= 0):
        raise ValueError("chain variances must be positive")

    coef_rows = np.tile(coef, B)[:, None]
    root_rows = np.tile(root, B)[:, None]
    mu = (x_t - coef_rows * eps) / root_rows
    resid = x_prev - mu
    quad = np.sum(resid**2, axis=1) / (2.0 * variances)
    norm = 0.5 * d * (LOG_2PI + np.log(variances))
    logps = (-quad - norm).reshape(B, T).sum(axis=1)

    # d logprob / d mu = resid / var ; d mu / d eps = -coef / root (diagonal)
    cache = LogprobCache(
        net,
        params,
        inputs,
        resid / variances[:, None],
        -(coef_rows / root_rows)[:, 0],
        B,
        T,
    )
    return logps, cache


def chain_logprob_grad(
    net: EpsilonNet,
    params: ParamVector,
    cond,
    chain: DenoiseChain,
    sched: NoiseSchedule,
) -> tuple[float, ParamVector]:
    """Log-density of one chain plus its gradient w.r.t. the parameters."""
    logps, cache = chain_logprob_batch(net, params, np.atleast_2d(cond), [chain], sched)
    return float(logps[0]), cache.weighted_param_grad(np.ones(1))
