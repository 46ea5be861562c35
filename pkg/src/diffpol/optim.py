"""Optimizer suite over flat parameter vectors.

Five update rules: plain SGD, RMSProp, Adam, AdamW (decoupled weight decay,
bias-corrected moments) and the adaptive interpolating rule `adapg_step`,
which blends the raw gradient with the first moment via ``interp_lambda``
and averages successive intermediate iterates via ``omega``. All steps are
pure: they take (state, params, grad) and return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nets import ParamVector


class NonFiniteGradientError(ValueError):
    """A gradient component is NaN or infinite; the update was rejected."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient in parameter block {param_name!r}")


@dataclass(frozen=True)
class OptimHyper:
    """Shared hyperparameters for every update rule.

    ``weight_decay_lambda`` is the decoupled decay used by adamw_step;
    ``interp_lambda`` is the gradient/first-moment mixing weight used by
    adapg_step. The two are distinct on purpose and never aliased.
    """

    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay_lambda: float = 0.0
    interp_lambda: float = 0.5
    omega: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not 0 < self.beta1 < 1:
            raise ValueError(f"beta1 must be in (0,1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            raise ValueError(f"beta2 must be in (0,1), got {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay_lambda < 0:
            raise ValueError(
                f"weight_decay_lambda must be >= 0, got {self.weight_decay_lambda}"
            )
        if not 0 <= self.interp_lambda <= 1:
            raise ValueError(
                f"interp_lambda must be in [0,1], got {self.interp_lambda}"
            )
        if not 0 < self.omega <= 1.5:
            raise ValueError(f"omega must be in (0, 1.5], got {self.omega}")


@dataclass(frozen=True)
class OptimizerState:
    """First/second moments, previous intermediate iterate, step counter."""

    m: ParamVector
    v: ParamVector
    h_prev: ParamVector
    step: int = 0


def init_state(params: ParamVector) -> OptimizerState:
    """Fresh state: zero moments, h_prev seeded with the current iterate."""
    return OptimizerState(params.zeros_like(), params.zeros_like(), params.copy(), 0)


def _check_grad(grad: ParamVector) -> None:
    if np.all(np.isfinite(grad.values)):
        return
    bad = ~np.isfinite(grad.values)
    start = 0
    for name, shape in grad.layout:
        width = int(np.prod(shape))
        if bad[start : start + width].any():
            raise NonFiniteGradientError(name)
        start += width


def _check_layouts(state: OptimizerState, params: ParamVector, grad: ParamVector):
    params._check_same_layout(grad)
    params._check_same_layout(state.m)


def adamw_step(
    state: OptimizerState, params: ParamVector, grad: ParamVector, hp: OptimHyper
) -> tuple[OptimizerState, ParamVector]:
    """Bias-corrected moment update plus decoupled weight decay."""
    _check_layouts(state, params, grad)
    _check_grad(grad)
    i = state.step + 1
    m = hp.beta1 * state.m.values + (1 - hp.beta1) * grad.values
    v = hp.beta2 * state.v.values + (1 - hp.beta2) * grad.values**2
    m_hat = m / (1 - hp.beta1**i)
    v_hat = v / (1 - hp.beta2**i)
    theta = params.values - hp.eta * (
        m_hat / (np.sqrt(v_hat) + hp.eps) + hp.weight_decay_lambda * params.values
    )
    new_state = OptimizerState(
        params.with_values(m), params.with_values(v), state.h_prev, i
    )
    return new_state, params.with_values(theta)


def adam_step(
    state: OptimizerState, params: ParamVector, grad: ParamVector, hp: OptimHyper
) -> tuple[OptimizerState, ParamVector]:
    """AdamW with the decay term switched off."""
    return adamw_step(state, params, grad, replace(hp, weight_decay_lambda=0.0))


def adapg_step(
    state: OptimizerState, params: ParamVector, grad: ParamVector, hp: OptimHyper
) -> tuple[OptimizerState, ParamVector]:
    """Interpolated-numerator adaptive step with iterate averaging.

    No bias correction by design. The intermediate iterate is
    ``h = theta - eta * ((1-lambda) g + lambda m) / (sqrt(v) + eps)`` and the
    returned parameters are ``omega * h + (1-omega) * h_prev``. With
    ``interp_lambda=1, omega=1`` this is bias-correction-free Adam; with
    ``interp_lambda=0, omega=1`` it is RMSProp.
    """
    _check_layouts(state, params, grad)
    _check_grad(grad)
    m = hp.beta1 * state.m.values + (1 - hp.beta1) * grad.values
    v = hp.beta2 * state.v.values + (1 - hp.beta2) * grad.values**2
    numer = (1 - hp.interp_lambda) * grad.values + hp.interp_lambda * m
    h = params.values - hp.eta * numer / (np.sqrt(v) + hp.eps)
    theta = hp.omega * h + (1 - hp.omega) * state.h_prev.values
    new_state = OptimizerState(
        params.with_values(m),
        params.with_values(v),
        params.with_values(h),
        state.step + 1,
    )
    return new_state, params.with_values(theta)


def rmsprop_step(
    state: OptimizerState, params: ParamVector, grad: ParamVector, hp: OptimHyper
) -> tuple[OptimizerState, ParamVector]:
    """Second-moment-only scaling: theta' = theta - eta * g / (sqrt(v) + eps)."""
    _check_layouts(state, params, grad)
    _check_grad(grad)
    v = hp.beta2 * state.v.values + (1 - hp.beta2) * grad.values**2
    theta = params.values - hp.eta * grad.values / (np.sqrt(v) + hp.eps)
    new_state = OptimizerState(
        state.m, params.with_values(v), state.h_prev, state.step + 1
    )
    return new_state, params.with_values(theta)


def sgd_step(params: ParamVector, grad: ParamVector, hp: OptimHyper) -> ParamVector:
    params._check_same_layout(grad)
    _check_grad(grad)
    return params.with_values(params.values - hp.eta * grad.values)


def clip_global_norm(grad: ParamVector, max_norm: float) -> ParamVector:
    """Rescale so the overall l2 norm is at most max_norm."""
    norm = float(np.linalg.norm(grad.values))
    if max_norm <= 0 or norm <= max_norm:
        return grad
    return grad.scale(max_norm / norm)


OPTIMIZER_KINDS = ("sgd", "rmsprop", "adam", "adamw", "adapg")


class Optimizer:
    """Stateful wrapper holding one OptimizerState per trained network.

    Steps are strictly sequential per instance; distinct instances (actor
    vs critics) are independent.
    """

    def __init__(self, kind: str, hp: OptimHyper, params: ParamVector):
        if kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {kind!r}, expected {OPTIMIZER_KINDS}")
        self.kind = kind
        self.hp = hp
        self.state = init_state(params)

    def step(self, params: ParamVector, grad: ParamVector) -> ParamVector:
        if self.kind == "sgd":
            return sgd_step(params, grad, self.hp)
        rule = {
            "rmsprop": rmsprop_step,
            "adam": adam_step,
            "adamw": adamw_step,
            "adapg": adapg_step,
        }[self.kind]
        self.state, new_params = rule(self.state, params, grad, self.hp)
        return new_params


def make_optimizer(kind: str, hp: OptimHyper, params: ParamVector) -> Optimizer:
    return Optimizer(kind, hp, params)
