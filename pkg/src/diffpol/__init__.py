"""Desk-scale lab for fine-tuning diffusion policies with adaptive optimizers."""

from .algos import AlgoConfig, RunLog, TrainResult, train
from .ddpm import (
    DenoiseChain,
    EpsilonNet,
    NoiseSchedule,
    chain_logprob,
    ddpm_loss_and_grad,
    make_schedule,
    p_sample_step,
    q_sample,
)
from .envs import make_env, make_expert
from .nets import MlpSpec, ParamVector, TimeEmbedding, mlp_backward, mlp_forward, time_embed
from .optim import (
    OptimHyper,
    OptimizerState,
    adamw_step,
    adapg_step,
    init_state,
    rmsprop_step,
    sgd_step,
)
from .policy import DemoDataset, DiffusionPolicy, make_policy, pretrain_bc, sample_action
from .rl import (
    CriticEnsemble,
    ReplayBuffer,
    Transition,
    advantage,
    double_q_target,
    episode_return,
    expectile_value_loss,
    polyak_update,
    v_bellman_q_loss,
    value_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig",
    "CriticEnsemble",
    "DemoDataset",
    "DenoiseChain",
    "DiffusionPolicy",
    "EpsilonNet",
    "MlpSpec",
    "NoiseSchedule",
    "OptimHyper",
    "OptimizerState",
    "ParamVector",
    "ReplayBuffer",
    "RunLog",
    "TimeEmbedding",
    "TrainResult",
    "Transition",
    "adamw_step",
    "adapg_step",
    "advantage",
    "chain_logprob",
    "ddpm_loss_and_grad",
    "double_q_target",
    "episode_return",
    "expectile_value_loss",
    "init_state",
    "make_env",
    "make_expert",
    "make_policy",
    "make_schedule",
    "mlp_backward",
    "mlp_forward",
    "p_sample_step",
    "polyak_update",
    "pretrain_bc",
    "q_sample",
    "rmsprop_step",
    "sample_action",
    "sgd_step",
    "time_embed",
    "train",
    "v_bellman_q_loss",
    "value_loss",
]
