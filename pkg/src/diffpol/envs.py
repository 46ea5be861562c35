"""Seeded toy continuous-control environments and scripted experts.

Both tasks are 2-D double integrators (dt 0.1, velocity damping 0.95) with
fixed-length episodes. ``pointmass`` is goal-reaching with the goal in the
observation; ``reacher2goal`` has two mirrored fixed goals, so expert
demonstrations split 50/50 and the action distribution at the start state
is bimodal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import DemoDataset

DT = 0.1
DAMPING = 0.95


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    horizon: int
    success_threshold: float

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


class _IntegratorEnv:
    """Common double-integrator mechanics; subclasses define goals/rewards."""

    spec: EnvSpec

    def __init__(self, seed: int | np.random.Generator = 0):
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.clamp_count = 0
        self._steps = 0
        self._done = True
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _obs(self) -> np.ndarray:
        raise NotImplementedError

    def _reward_dist(self) -> tuple[float, float]:
        raise NotImplementedError

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action):
        if self._done:
            raise RuntimeError("episode is done; call reset()")
        action = np.asarray(action, dtype=np.float64)
        clipped = np.clip(action, -1.0, 1.0)
        if np.any(clipped != action):
            self.clamp_count += 1
        self.vel = DAMPING * self.vel + DT * clipped
        self.pos = self.pos + DT * self.vel
        self._steps += 1
        reward, dist = self._reward_dist()
        reward -= 0.01 * float(np.dot(clipped, clipped)) if self._action_cost else 0.0
        self._done = self._steps >= self.spec.horizon
        info = {"dist": dist}
        if self._done:
            info["success"] = dist < self.spec.success_threshold
        return self._obs(), reward, self._done, info

    _action_cost = True


class PointMassEnv(_IntegratorEnv):
    """Reach a per-episode goal; obs = (pos, vel, goal). Reward <= 0."""

    spec = EnvSpec("pointmass", obs_dim=6, act_dim=2, horizon=100, success_threshold=0.1)
    _action_cost = True

    def __init__(self, seed=0):
        super().__init__(seed)
        self.goal = np.zeros(2)

    def reset(self) -> np.ndarray:
        self.pos = self._rng.uniform(-1.0, 1.0, 2)
        self.vel = np.zeros(2)
        self.goal = self._rng.uniform(-1.0, 1.0, 2)
        self._steps = 0
        self._done = False
        return self._obs()

    def _obs(self):
        return np.concatenate([self.pos, self.vel, self.goal])

    def _reward_dist(self):
        dist = float(np.linalg.norm(self.pos - self.goal))
        return -dist, dist


class Reacher2GoalEnv(_IntegratorEnv):
    """Two mirrored goals; reward is minus the distance to the nearer one."""

    spec = EnvSpec("reacher2goal", obs_dim=4, act_dim=2, horizon=40, success_threshold=0.1)
    goals = np.array([[0.5, 0.0], [-0.5, 0.0]])
    _action_cost = False

    def reset(self) -> np.ndarray:
        self.pos = self._rng.uniform(-0.05, 0.05, 2)
        self.vel = np.zeros(2)
        self._steps = 0
        self._done = False
        return self._obs()

    def _obs(self):
        return np.concatenate([self.pos, self.vel])

    def _reward_dist(self):
        dist = float(np.min(np.linalg.norm(self.goals - self.pos, axis=1)))
        return -dist, dist


ENVS = {"pointmass": PointMassEnv, "reacher2goal": Reacher2GoalEnv}


def make_env(name: str, seed=0):
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}, expected one of {sorted(ENVS)}")
    return ENVS[name](seed)


def env_spec(name: str) -> EnvSpec:
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}, expected one of {sorted(ENVS)}")
    return ENVS[name].spec


def pd_action(pos, vel, goal, kp: float = 4.0, kd: float = 3.0) -> np.ndarray:
    return np.clip(kp * (np.asarray(goal) - np.asarray(pos)) - kd * np.asarray(vel), -1.0, 1.0)


class PointMassExpert:
    """PD controller toward the observed goal, with optional action noise."""

    def __init__(self, noise: float = 0.0):
        self.noise = noise

    def reset(self, rng: np.random.Generator) -> None:
        pass

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        pos, vel, goal = obs[:2], obs[2:4], obs[4:6]
        a = pd_action(pos, vel, goal)
        if self.noise > 0:
            a = a + self.noise * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


class ReacherExpert:
    """Picks the nearer goal each episode (coin flip on ties), then PD."""

    def __init__(self, noise: float = 0.0):
        self.noise = noise
        self._goal = Reacher2GoalEnv.goals[0]

    def reset(self, rng: np.random.Generator) -> None:
        self._choice = int(rng.integers(0, 2))

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        pos, vel = obs[:2], obs[2:4]
        dists = np.linalg.norm(Reacher2GoalEnv.goals - pos, axis=1)
        if abs(dists[0] - dists[1]) < 0.2:
            goal = Reacher2GoalEnv.goals[self._choice]
        else:
            goal = Reacher2GoalEnv.goals[int(np.argmin(dists))]
        a = pd_action(pos, vel, goal)
        if self.noise > 0:
            a = a + self.noise * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


EXPERTS = {"pointmass": PointMassExpert, "reacher2goal": ReacherExpert}


def make_expert(env_name: str, noise: float = 0.0):
    if env_name not in EXPERTS:
        raise ValueError(f"no scripted expert for {env_name!r}")
    return EXPERTS[env_name](noise)


def rollout_expert(env, expert, rng: np.random.Generator):
    """One scripted episode; returns (obs rows, action rows, total reward, success)."""
    obs_rows, act_rows = [], []
    obs = env.reset()
    expert.reset(rng)
    total = 0.0
    done = False
    info = {}
    while not done:
        a = expert.act(obs, rng)
        obs_rows.append(obs)
        act_rows.append(a)
        obs, r, done, info = env.step(a)
        total += r
    return np.array(obs_rows), np.array(act_rows), total, bool(info.get("success", False))


def gen_demos(env, expert, n_episodes: int, rng: np.random.Generator) -> DemoDataset:
    """Roll the scripted expert and package normalized (obs, action) pairs."""
    if n_episodes < 1:
        raise ValueError("need at least one demonstration episode")
    all_obs, all_act = [], []
    for _ in range(int(n_episodes)):
        obs_rows, act_rows, _, _ = rollout_expert(env, expert, rng)
        all_obs.append(obs_rows)
        all_act.append(act_rows)
    return DemoDataset.from_raw(np.concatenate(all_obs), np.concatenate(all_act))
