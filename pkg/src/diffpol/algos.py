"""The six diffusion-policy fine-tuning methods and the outer training loop.

Four are value-guided off-policy updates over a persistent replay buffer
(dipo, dql, idql, qsm); two are on-policy policy-gradient updates over the
freshest rollout only (dppo, dawr). Every update function only *computes*
losses and gradients; parameter movement happens in ``train`` through an
injected optimizer, so the loss graph is identical no matter which update
rule is configured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ddpm, rl
from .ddpm import DenoiseChain
from .nets import MlpNet, ParamVector, mlp_backward, mlp_forward
from .optim import OptimHyper, clip_global_norm, make_optimizer
from .policy import DiffusionPolicy, denormalize, normalize, sample_actions
from .rl import CriticEnsemble, ReplayBuffer, Transition

METHODS = ("dppo", "dawr", "dipo", "dql", "idql", "qsm")
ON_POLICY = ("dppo", "dawr")
OPTIMIZERS = ("adamw", "adapg", "rmsprop", "sgd")


class TrainingDiverged(RuntimeError):
    """A loss or parameter went non-finite; the run was aborted."""


@dataclass
class AlgoConfig:
    """Method, optimizer family, and every fine-tuning knob."""

    method: str = "dppo"
    optimizer: str = "adamw"
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

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected {METHODS}")
        if self.optimizer not in OPTIMIZERS + ("adam",):
            raise ValueError(
                f"unknown optimizer {self.optimizer!r}, expected {OPTIMIZERS}"
            )
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"clip_eps must be in (0,1), got {self.clip_eps}")
        for name in ("eta_dipo", "eta_dql", "alpha_qsm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.tau_idql < 1:
            raise ValueError("tau_idql must be in (0,1)")
        for name in ("n_action_samples", "batch_size", "n_envs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class UpdateResult:
    """Losses plus per-network gradients; keys in {actor, v, q1, q2}."""

    actor_loss: float
    critic_loss: float
    grads: dict[str, ParamVector] = field(default_factory=dict)


def _stack(batch: list[Transition]):
    S = np.stack([tr.s for tr in batch])
    A = np.stack([tr.a for tr in batch])
    R = np.array([tr.r for tr in batch])
    S2 = np.stack([tr.s_next for tr in batch])
    D = np.array([float(tr.done) for tr in batch])
    return S, A, R, S2, D


def q_value_and_action_grad(qnet: MlpNet, S: np.ndarray, A: np.ndarray):
    """Q(s,a) per row and the gradient of each row's value w.r.t. its action."""
    x = np.concatenate([S, A], axis=1)
    q = mlp_forward(qnet.params, qnet.spec, x)[:, 0]
    _, grad_in = mlp_backward(qnet.params, qnet.spec, x, np.ones((x.shape[0], 1)))
    return q, grad_in[:, S.shape[1] :]


def _critic_value(net: MlpNet, X: np.ndarray) -> np.ndarray:
    return mlp_forward(net.params, net.spec, X)[:, 0]


def _target_q(params: ParamVector, spec, X: np.ndarray) -> np.ndarray:
    return mlp_forward(params, spec, X)[:, 0]


# --------------------------------------------------------------------------
# on-policy updates
# --------------------------------------------------------------------------


def _policy_gradient_pieces(policy: DiffusionPolicy, batch: list[Transition]):
    S = np.stack([tr.s for tr in batch])
    chains = [tr.chain for tr in batch]
    logps, cache = ddpm.chain_logprob_batch(
        policy.net, policy.params, S, chains, policy.sched
    )
    return S, chains, logps, cache


def _value_fit(critics: CriticEnsemble, S: np.ndarray, targets: np.ndarray):
    v_pred = _critic_value(critics.v, S)
    loss, dloss = rl.value_loss(v_pred, targets)
    grad, _ = mlp_backward(critics.v.params, critics.v.spec, S, dloss[:, None])
    return v_pred, loss, grad


def dppo_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    batch: list[Transition],
    cfg: AlgoConfig,
) -> UpdateResult:
    """Clipped-surrogate policy gradient over recorded denoise chains.

    The likelihood ratio is exp(logpi_new - logpi_old) with the old side
    frozen at collection time; the log-ratio is clamped at +-20 before
    exponentiation.
    """
    B = len(batch)
    S, _, logps, cache = _policy_gradient_pieces(policy, batch)
    rtg = np.array([tr.rtg for tr in batch])
    old_lp = np.array([tr.logprob for tr in batch])

    v_pred = _critic_value(critics.v, S)
    adv = rl.advantage(rtg, v_pred, cfg.gamma_denoise)
    if cfg.normalize_adv and B > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    log_ratio = logps - old_lp
    clamped = np.clip(log_ratio, -20.0, 20.0)
    ratio = np.exp(clamped)
    s_plain = adv * ratio
    s_clip = adv * np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surrogate = np.minimum(s_plain, s_clip)
    actor_loss = -float(np.mean(surrogate))

    active = (s_plain <= s_clip) & (np.abs(log_ratio) < 20.0)
    lp_weights = -(active * adv * ratio) / B
    actor_grad = cache.weighted_param_grad(lp_weights)

    _, critic_loss, v_grad = _value_fit(critics, S, rtg)
    return UpdateResult(actor_loss, critic_loss, {"actor": actor_grad, "v": v_grad})


def dawr_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    batch: list[Transition],
    cfg: AlgoConfig,
) -> UpdateResult:
    """Advantage-weighted regression: log-likelihood weighted by exp(adv).

    The exponential weight is clamped to [0, 20] and treated as a constant
    (no gradient flows through the advantage).
    """
    B = len(batch)
    S, _, logps, cache = _policy_gradient_pieces(policy, batch)
    rtg = np.array([tr.rtg for tr in batch])

    v_pred = _critic_value(critics.v, S)
    adv = rl.advantage(rtg, v_pred, cfg.gamma_denoise)
    if cfg.normalize_adv and B > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    w = np.minimum(np.exp(adv), 20.0)

    actor_loss = -float(np.mean(w * logps))
    actor_grad = cache.weighted_param_grad(-w / B)

    _, critic_loss, v_grad = _value_fit(critics, S, rtg)
    return UpdateResult(actor_loss, critic_loss, {"actor": actor_grad, "v": v_grad})


# --------------------------------------------------------------------------
# off-policy updates
# --------------------------------------------------------------------------


def improve_actions(
    actions: np.ndarray,
    grad_fn,
    eta: float,
    steps: int,
) -> np.ndarray:
    """Gradient-ascent refinement a <- clip(a + eta * grad_fn(a)) per step.

    Rows whose gradient goes non-finite keep their last finite value for
    the remaining steps.
    """
    a = np.array(actions, dtype=np.float64)
    for _ in range(int(steps)):
        g = np.asarray(grad_fn(a), dtype=np.float64)
        ok = np.all(np.isfinite(g), axis=-1) if g.ndim > 1 else np.isfinite(g).all()
        stepped = np.clip(a + eta * g, -1.0, 1.0)
        a = np.where(np.asarray(ok)[..., None], stepped, a) if g.ndim > 1 else (
            stepped if ok else a
        )
    return a


def _bc_terms(policy, S, A, rng):
    B = S.shape[0]
    t = rng.integers(1, policy.sched.T + 1, size=B)
    noise = rng.standard_normal((B, A.shape[1]))
    return ddpm.ddpm_loss_and_grad(
        policy.net, policy.params, A, S, t, noise, policy.sched
    )


def dipo_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    buffer: ReplayBuffer,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """Action-gradient method: improve buffered actions along dQ/da, then
    clone them with the denoising loss. The improved actions are written
    back into the buffer."""
    idx = buffer.sample_indices(cfg.batch_size, rng)
    batch = [buffer[i] for i in idx]
    S, A, R, S2, D = _stack(batch)

    a_next, _ = sample_actions(policy, S2, rng)
    q_next = _target_q(critics.q1_target, critics.q1.spec, np.concatenate([S2, a_next], axis=1))
    y = R + (1.0 - D) * cfg.gamma * q_next
    q_pred = _critic_value(critics.q1, np.concatenate([S, A], axis=1))
    critic_loss, dq = rl.value_loss(q_pred, y)
    q1_grad, _ = mlp_backward(
        critics.q1.params, critics.q1.spec, np.concatenate([S, A], axis=1), dq[:, None]
    )

    a_imp = improve_actions(
        A,
        lambda a: q_value_and_action_grad(critics.q1, S, a)[1],
        cfg.eta_dipo,
        cfg.action_grad_steps,
    )
    for j, i in enumerate(idx):
        buffer[i].a = a_imp[j]

    actor_loss, actor_grad = _bc_terms(policy, S, a_imp, rng)
    return UpdateResult(actor_loss, critic_loss, {"actor": actor_grad, "q1": q1_grad})


def _double_q_critic_terms(policy, critics, S, A, R, S2, D, cfg, rng):
    """Shared double-Q regression toward r + gamma * min of target nets."""
    a_next, _ = sample_actions(policy, S2, rng)
    X2 = np.concatenate([S2, a_next], axis=1)
    q1t = _target_q(critics.q1_target, critics.q1.spec, X2)
    q2t = _target_q(critics.q2_target, critics.q2.spec, X2)
    y = rl.double_q_target(R, D, q1t, q2t, cfg.gamma)

    X = np.concatenate([S, A], axis=1)
    grads = {}
    losses = []
    for key, net in (("q1", critics.q1), ("q2", critics.q2)):
        pred = _critic_value(net, X)
        loss, dq = rl.value_loss(pred, y)
        grads[key], _ = mlp_backward(net.params, net.spec, X, dq[:, None])
        losses.append(loss)
    return float(np.mean(losses)), grads


def chain_param_grad_wrt_action(
    policy: DiffusionPolicy,
    conds: np.ndarray,
    chains: list[DenoiseChain],
    upstream: np.ndarray,
    full_chain: bool,
) -> ParamVector:
    """Gradient of sum_b upstream_b . a_b(params) for sampled chains.

    Recorded noise draws are held fixed. By default only the final
    (deterministic) denoise step is differentiated; ``full_chain`` walks the
    cotangent back through every step.
    """
    sched = policy.sched
    net = policy.net
    B = len(chains)
    act = slice(net.obs_dim, net.obs_dim + net.action_dim)
    cot = np.array(upstream, dtype=np.float64)
    total = policy.params.zeros_like()
    # chain row i holds the transition at t = T - i; walk t = 1 upward
    for t in range(1, sched.T + 1):
        i = sched.T - t
        beta = sched.beta[t - 1]
        coef = beta / np.sqrt(1.0 - sched.alpha_bar[t - 1])
        root = np.sqrt(1.0 - beta)
        x_t = np.stack([c.states[i] for c in chains])
        inputs = net.build_input(x_t, conds, t)
        g, gin = mlp_backward(policy.params, net.spec, inputs, cot * (-coef / root))
        total = total + g
        if not full_chain or t == sched.T:
            break
        cot = cot / root + gin[:, act]
    return total


def dql_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    buffer: ReplayBuffer,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """Denoising loss minus a Q bonus on freshly sampled actions; double-Q
    critics regress toward the min of the target networks."""
    batch = buffer.sample(cfg.batch_size, rng)
    S, A, R, S2, D = _stack(batch)

    critic_loss, grads = _double_q_critic_terms(policy, critics, S, A, R, S2, D, cfg, rng)

    bc_loss, bc_grad = _bc_terms(policy, S, A, rng)
    chains = ddpm.sample_chain_batch(policy.net, policy.params, S, policy.sched, rng)
    a_hat = np.stack([c.final for c in chains])
    q_val, dqda = q_value_and_action_grad(critics.q1, S, a_hat)
    actor_loss = bc_loss - cfg.eta_dql * float(np.mean(q_val))
    q_path = chain_param_grad_wrt_action(
        policy, S, chains, -cfg.eta_dql * dqda / len(batch), cfg.full_chain_grad
    )
    grads["actor"] = bc_grad + q_path
    return UpdateResult(actor_loss, critic_loss, grads)


def idql_weights(q: np.ndarray, v: float | np.ndarray, tau: float) -> np.ndarray:
    """Resampling weights |tau - 1(Q<V)| / max(|Q - V|, 1e-6)."""
    q = np.asarray(q, dtype=np.float64)
    ind = (q < v).astype(np.float64)
    return np.abs(tau - ind) / np.maximum(np.abs(q - v), 1e-6)


def resample_probs(weights: np.ndarray) -> np.ndarray:
    """Normalize candidate weights; any degenerate total falls back to uniform."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


def idql_select_actions(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    states: np.ndarray,
    cfg: AlgoConfig,
    rng: np.random.Generator,
):
    """Draw candidates per state and resample by the expectile weights."""
    states = np.atleast_2d(states)
    n, k = states.shape[0], cfg.n_action_samples
    rep = np.repeat(states, k, axis=0)
    actions, chains = sample_actions(policy, rep, rng)
    X = np.concatenate([rep, actions], axis=1)
    q = np.minimum(_critic_value(critics.q1, X), _critic_value(critics.q2, X))
    v = _critic_value(critics.v, states)
    picked_a = np.empty((n, actions.shape[1]))
    picked_chains = []
    for i in range(n):
        w = idql_weights(q[i * k : (i + 1) * k], v[i], cfg.tau_idql)
        j = int(rng.choice(k, p=resample_probs(w)))
        picked_a[i] = actions[i * k + j]
        picked_chains.append(chains[i * k + j])
    return picked_a, picked_chains


def idql_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    buffer: ReplayBuffer,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """Expectile V, V-bootstrapped Q, and a behavior-cloning actor."""
    batch = buffer.sample(cfg.batch_size, rng)
    S, A, R, S2, D = _stack(batch)
    X = np.concatenate([S, A], axis=1)

    q_min_t = np.minimum(
        _target_q(critics.q1_target, critics.q1.spec, X),
        _target_q(critics.q2_target, critics.q2.spec, X),
    )
    v_pred = _critic_value(critics.v, S)
    v_loss, dv = rl.expectile_value_loss(q_min_t, v_pred, cfg.tau_idql)
    v_grad, _ = mlp_backward(critics.v.params, critics.v.spec, S, dv[:, None])

    v_next = (1.0 - D) * _critic_value(critics.v, S2)
    grads = {"v": v_grad}
    q_losses = []
    for key, net in (("q1", critics.q1), ("q2", critics.q2)):
        pred = _critic_value(net, X)
        loss, dq = rl.v_bellman_q_loss(R, v_next, pred, cfg.gamma)
        grads[key], _ = mlp_backward(net.params, net.spec, X, dq[:, None])
        q_losses.append(loss)

    actor_loss, actor_grad = _bc_terms(policy, S, A, rng)
    grads["actor"] = actor_grad
    return UpdateResult(actor_loss, float(v_loss + np.mean(q_losses)), grads)


def qsm_update(
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    buffer: ReplayBuffer,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """Match the noise network's output to alpha * dQ/da at buffer actions.

    The network is evaluated at forward-corrupted actions with a uniformly
    drawn step; the Q gradient is taken at the clean stored action and held
    constant."""
    batch = buffer.sample(cfg.batch_size, rng)
    S, A, R, S2, D = _stack(batch)

    critic_loss, grads = _double_q_critic_terms(policy, critics, S, A, R, S2, D, cfg, rng)

    B = S.shape[0]
    t = rng.integers(1, policy.sched.T + 1, size=B)
    noise = rng.standard_normal(A.shape)
    x_t = ddpm.q_sample(A, t, noise, policy.sched)
    inputs = policy.net.build_input(x_t, S, t)
    eps = mlp_forward(policy.params, policy.net.spec, inputs)

    _, dqda = q_value_and_action_grad(critics.q1, S, A)
    resid = eps - cfg.alpha_qsm * dqda
    actor_loss = float(np.sum(resid**2) / B)
    actor_grad, _ = mlp_backward(policy.params, policy.net.spec, inputs, 2.0 * resid / B)
    grads["actor"] = actor_grad
    return UpdateResult(actor_loss, critic_loss, grads)


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------

RUNLOG_COLUMNS = (
    "iteration",
    "env_steps",
    "avg_reward",
    "success_rate",
    "actor_loss",
    "critic_loss",
)


@dataclass
class RunLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, row: tuple) -> None:
        self.rows.append(tuple(row))

    def column(self, name: str) -> np.ndarray:
        i = RUNLOG_COLUMNS.index(name)
        return np.array([row[i] for row in self.rows], dtype=np.float64)


@dataclass
class TrainResult:
    log: RunLog
    policy: DiffusionPolicy
    critics: CriticEnsemble


def _collect_rollouts(envs, policy, critics, cfg, rng, rollout_id):
    """Run whole lockstep episodes across the env instances.

    Returns (transitions, episode rewards, episode successes). Observations
    and actions in the transitions are normalized; the raw env interface
    only appears here.
    """
    norm = policy.norm
    horizon = envs[0].spec.horizon
    n = len(envs)
    on_policy = cfg.method in ON_POLICY

    transitions: list[Transition] = []
    ep_rewards, ep_successes = [], []

    rounds = max(1, math.ceil(cfg.n_steps / (n * horizon)))
    for _ in range(rounds):
        obs = np.stack([env.reset() for env in envs])
        obs_n = normalize(obs, norm.obs) if norm else obs
        rows = [[] for _ in range(n)]
        totals = np.zeros(n)
        for _step in range(horizon):
            if cfg.method == "idql":
                actions, chains = idql_select_actions(policy, critics, obs_n, cfg, rng)
            else:
                actions, chains = sample_actions(policy, obs_n, rng)
            env_actions = denormalize(actions, norm.act) if norm else actions
            next_obs = np.empty_like(obs)
            for i, env in enumerate(envs):
                o2, r, done, info = env.step(env_actions[i])
                next_obs[i] = o2
                totals[i] += r
                rows[i].append(
                    Transition(
                        s=obs_n[i],
                        a=actions[i],
                        r=r,
                        s_next=np.zeros_like(obs_n[i]),
                        done=done,
                        chain=chains[i] if on_policy else None,
                        rollout_id=rollout_id,
                    )
                )
                if done:
                    ep_successes.append(float(info.get("success", False)))
            next_n = normalize(next_obs, norm.obs) if norm else next_obs
            for i in range(n):
                rows[i][-1].s_next = next_n[i]
            obs, obs_n = next_obs, next_n
        ep_rewards.extend(totals.tolist())
        for i in range(n):
            rtg = rl.reward_to_go([tr.r for tr in rows[i]], cfg.gamma)
            for k, tr in enumerate(rows[i]):
                tr.rtg = float(rtg[k])
                if on_policy:
                    tr.logprob = ddpm.chain_logprob(tr.chain, policy.sched)
            transitions.extend(rows[i])
    return transitions, ep_rewards, ep_successes


def _dispatch_update(policy, critics, buffer, cfg, rng):
    if cfg.method in ON_POLICY:
        batch = buffer.sample(cfg.batch_size, rng)
        fn = dppo_update if cfg.method == "dppo" else dawr_update
        return fn(policy, critics, batch, cfg)
    fn = {"dipo": dipo_update, "dql": dql_update, "idql": idql_update, "qsm": qsm_update}[
        cfg.method
    ]
    return fn(policy, critics, buffer, cfg, rng)


def train(
    env_factory,
    policy: DiffusionPolicy,
    critics: CriticEnsemble,
    cfg: AlgoConfig,
    actor_hp: OptimHyper,
    critic_hp: OptimHyper,
    rng: np.random.Generator,
    optimizer_factory=make_optimizer,
    on_row=None,
) -> TrainResult:
    """Iterate rollout collection and minibatch updates for cfg.n_iters.

    On-policy methods rebuild the buffer every iteration from the fresh
    rollout; off-policy methods keep a persistent FIFO. All parameter
    movement goes through optimizers built by ``optimizer_factory`` (one per
    trained network), so swapping the optimizer family cannot change the
    loss computation itself.
    """
    envs = [env_factory(int(s)) for s in rng.integers(0, 2**31 - 1, size=cfg.n_envs)]
    buffer = ReplayBuffer(cfg.buffer_capacity)

    opts = {"actor": optimizer_factory(cfg.optimizer, actor_hp, policy.params)}
    for key in ("v", "q1", "q2"):
        net = getattr(critics, key)
        if net is not None:
            opts[key] = optimizer_factory(cfg.optimizer, critic_hp, net.params)

    log = RunLog()
    env_steps = 0
    for it in range(cfg.n_iters):
        if cfg.method in ON_POLICY:
            buffer.clear()
        transitions, ep_rewards, ep_successes = _collect_rollouts(
            envs, policy, critics, cfg, rng, rollout_id=it
        )
        buffer.extend(transitions)
        env_steps += len(transitions)

        actor_losses, critic_losses = [], []
        for _ in range(cfg.num_batch):
            res = _dispatch_update(policy, critics, buffer, cfg, rng)
            for key, grad in res.grads.items():
                if cfg.grad_clip:
                    grad = clip_global_norm(grad, cfg.grad_clip)
                if key == "actor":
                    policy = policy.with_params(opts["actor"].step(policy.params, grad))
                else:
                    net = getattr(critics, key)
                    net.params = opts[key].step(net.params, grad)
            critics.update_targets()
            actor_losses.append(res.actor_loss)
            critic_losses.append(res.critic_loss)

        actor_loss = float(np.mean(actor_losses)) if actor_losses else float("nan")
        critic_loss = float(np.mean(critic_losses)) if critic_losses else float("nan")
        if actor_losses and not (np.isfinite(actor_loss) and np.isfinite(critic_loss)):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        if not np.all(np.isfinite(policy.params.values)):
            raise TrainingDiverged(f"non-finite actor parameters at iteration {it}")

        row = (
            it,
            env_steps,
            float(np.mean(ep_rewards)),
            float(np.mean(ep_successes)) if ep_successes else 0.0,
            actor_loss,
            critic_loss,
        )
        log.append(row)
        if on_row is not None:
            on_row(row, policy, critics)
    return TrainResult(log, policy, critics)
