"""Small MLPs over flat parameter vectors, with analytic backprop.

Everything here is plain float64 numpy. Parameters live in a single flat
array (`ParamVector`) so that the optimizers in `diffpol.optim` can treat
every network identically; the layout maps named slices back to layer
matrices. Forward and backward passes are pure functions of their inputs,
which keeps them trivially thread-safe and easy to check against finite
differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu", "mish")

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ShapeError(ValueError):
    """Raised when an input or parameter shape does not match a network."""


def _canonical_layout(layout) -> Layout:
    return tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in layout))


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter (or gradient) container.

    ``layout`` is an immutable sequence of (name, shape) records mapping
    slices of ``values`` to layers. Two ParamVectors with equal layout are
    element-wise combinable. The underlying array is marked read-only;
    updates produce new vectors.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        layout = _canonical_layout(self.layout)
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != layout_size(layout):
            raise ShapeError(
                f"parameter vector has {values.size} values but layout needs "
                f"{layout_size(layout)}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(_canonical_layout(layout))), layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector.zeros(self.layout)

    @property
    def size(self) -> int:
        return self.values.size

    def slice_bounds(self, name: str) -> tuple[int, int]:
        start = 0
        for n, shape in self.layout:
            width = int(np.prod(shape))
            if n == name:
                return start, start + width
            start += width
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        """Reshaped (read-only) view of one named slice."""
        start, stop = self.slice_bounds(name)
        shape = dict(self.layout)[name]
        return self.values[start:stop].reshape(shape)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def _check_same_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ShapeError("ParamVector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return self.with_values(self.values - other.values)

    def scale(self, c: float) -> "ParamVector":
        return self.with_values(self.values * float(c))

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.copy())


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected net: dims plus activation name."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


def mlp_layout(spec: MlpSpec) -> Layout:
    """(name, shape) records for weight matrices (out, in) and bias vectors."""
    dims = spec.dims
    layout = []
    for i in range(spec.n_layers):
        layout.append((f"w{i}", (dims[i + 1], dims[i])))
        layout.append((f"b{i}", (dims[i + 1],)))
    return tuple(layout)


def init_mlp_params(spec: MlpSpec, seed: int | np.random.Generator = 0) -> ParamVector:
    """Seeded uniform init, scale 1/sqrt(fan_in) per layer."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for name, shape in mlp_layout(spec):
        fan_in = shape[1] if name.startswith("w") else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ParamVector(np.concatenate(chunks), mlp_layout(spec))


def _sigmoid(x):
    # exp(x - log(1 + e^x)) is stable for both signs
    return np.exp(x - np.logaddexp(0.0, x))


def _act(name: str, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    sp = np.logaddexp(0.0, z)
    return z * np.tanh(sp)


def _act_deriv(name: str, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    sp = np.logaddexp(0.0, z)
    t = np.tanh(sp)
    return t + z * (1.0 - t * t) * _sigmoid(z)


def _as_batch(x, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} must have {dim} columns, got shape {x.shape}")
    return x, single


def _check_params(params: ParamVector, spec: MlpSpec) -> None:
    if params.layout != mlp_layout(spec):
        raise ShapeError("parameter layout does not match MlpSpec")


def mlp_forward(params: ParamVector, spec: MlpSpec, x) -> np.ndarray:
    """Forward pass; accepts a single vector or a (n, input_dim) batch."""
    _check_params(params, spec)
    h, single = _as_batch(x, spec.input_dim, "input")
    for i in range(spec.n_layers):
        z = h @ params.view(f"w{i}").T + params.view(f"b{i}")
        h = _act(spec.activation, z) if i < spec.n_layers - 1 else z
    return h[0] if single else h


def mlp_backward(params: ParamVector, spec: MlpSpec, x, upstream):
    """Gradients of ``upstream . mlp_forward`` w.r.t. params and input.

    ``upstream`` is dL/dy with the same leading shape as the input; batched
    calls return parameter gradients summed over rows.
    """
    _check_params(params, spec)
    xb, single = _as_batch(x, spec.input_dim, "input")
    ub, u_single = _as_batch(upstream, spec.output_dim, "upstream")
    if single != u_single or xb.shape[0] != ub.shape[0]:
        raise ShapeError("input and upstream batch shapes differ")

    acts = [xb]
    zs = []
    h = xb
    for i in range(spec.n_layers):
        z = h @ params.view(f"w{i}").T + params.view(f"b{i}")
        zs.append(z)
        h = _act(spec.activation, z) if i < spec.n_layers - 1 else z
        acts.append(h)

    grads = {}
    delta = ub
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            delta = delta * _act_deriv(spec.activation, zs[i])
        grads[f"w{i}"] = delta.T @ acts[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ params.view(f"w{i}")

    flat = np.concatenate(
        [grads[name].ravel() for name, _ in mlp_layout(spec)]
    )
    grad_input = delta[0] if single else delta
    return ParamVector(flat, params.layout), grad_input


@dataclass
class MlpNet:
    """Spec + parameters bundle; the working unit for critics and heads."""

    spec: MlpSpec
    params: ParamVector

    def forward(self, x) -> np.ndarray:
        return mlp_forward(self.params, self.spec, x)

    def backward(self, x, upstream):
        return mlp_backward(self.params, self.spec, x, upstream)


def make_net(input_dim, hidden, output_dim, activation="tanh", seed=0) -> MlpNet:
    spec = MlpSpec(input_dim, tuple(hidden), output_dim, activation)
    return MlpNet(spec, init_mlp_params(spec, seed))


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal step features at geometrically spaced frequencies."""

    dim: int
    max_period: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2 != 0:
            raise ShapeError(f"embedding dim must be even and >= 2, got {self.dim}")
        if self.max_period <= 0:
            raise ValueError("max_period must be positive")


def time_embed(t, emb: TimeEmbedding) -> np.ndarray:
    """Embed step index t (scalar or array) into [sin | cos] features."""
    half = emb.dim // 2
    freqs = emb.max_period ** (-np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# --- checkpoint format: flat little-endian f64 + JSON layout header ---


def save_params(bin_path, pv: ParamVector, extra: dict | None = None) -> None:
    """Write ``<path>`` (raw <f8 values) and ``<path stem>.json`` header."""
    bin_path = Path(bin_path)
    bin_path.write_bytes(pv.values.astype("<f8").tobytes())
    header = {
        "format": "paramvector-v1",
        "dtype": "<f8",
        "count": pv.size,
        "layout": [[name, list(shape)] for name, shape in pv.layout],
    }
    if extra:
        header["extra"] = extra
    bin_path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def load_params(bin_path) -> tuple[ParamVector, dict]:
    bin_path = Path(bin_path)
    header = json.loads(bin_path.with_suffix(".json").read_text())
    if header.get("format") != "paramvector-v1":
        raise ValueError(f"unrecognized checkpoint header in {bin_path}")
    values = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    return ParamVector(values, layout), header.get("extra", {})
