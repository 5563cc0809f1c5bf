"""Differentiable MLP primitives in float64 numpy.

Everything the learners need is here: parameter layout for dense nets,
forward evaluation, hand-rolled reverse-mode gradients for the fixed MLP
graph, a squashed-Gaussian policy head, Adam, Polyak averaging, and a
finite-difference gradient checker. Parameters live in flat float64
vectors so they can be stacked into ensembles, checkpointed, and shared
read-only across threads; all functions return new values instead of
mutating their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

Array = np.ndarray

ACTIVATIONS = ("relu", "tanh")

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# largest float64 strictly below 1; keeps squashed actions inside the open interval
_TANH_BOUND = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class MLPSpec:
    """Shape of a dense net: input -> hidden layers (activated) -> linear output.

    hidden_dims may be empty, which degenerates to a single linear layer.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def init_mlp(spec: MLPSpec, seed: int) -> Array:
    """Fan-in scaled uniform init, deterministic given (spec, seed)."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    parts = []
    for i in range(len(dims) - 1):
        bound = 1.0 / math.sqrt(dims[i])
        parts.append(rng.uniform(-bound, bound, size=dims[i] * dims[i + 1]))
        parts.append(rng.uniform(-bound, bound, size=dims[i + 1]))
    return np.concatenate(parts)


def unpack(params: Array, spec: MLPSpec) -> list[tuple[Array, Array]]:
    """Views of (W, b) per layer. params may carry leading axes (ensembles)."""
    if params.shape[-1] != spec.param_count:
        raise ValueError(
            f"params length {params.shape[-1]} != spec parameter count {spec.param_count}"
        )
    dims = spec.layer_dims
    lead = params.shape[:-1]
    layers = []
    offset = 0
    for i in range(len(dims) - 1):
        din, dout = dims[i], dims[i + 1]
        w = params[..., offset : offset + din * dout].reshape(*lead, din, dout)
        offset += din * dout
        b = params[..., offset : offset + dout]
        offset += dout
        layers.append((w, b))
    return layers


def _activate(x: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _activation_grad_from_post(post: Array, kind: str) -> Array:
    # derivative expressed through the post-activation value
    if kind == "relu":
        return (post > 0.0).astype(np.float64)
    return 1.0 - post * post


def forward_cached(params: Array, spec: MLPSpec, x: Array) -> tuple[Array, list[Array]]:
    """Forward pass keeping the per-layer inputs needed for backprop.

    x: (..., input_dim). With ensemble params (K, P) and x (N, input_dim)
    the output broadcasts to (K, N, output_dim).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != spec input_dim {spec.input_dim}")
    if params.ndim > 1 and x.ndim == 1:
        x = x[None, :]  # ensemble evaluation always runs batched
    layers = unpack(params, spec)
    h = x
    cache = [h]
    for i, (w, b) in enumerate(layers):
        pre = h @ w
        if w.ndim > 2:  # ensemble: bias broadcasts over the batch axis
            pre = pre + b[..., None, :]
        else:
            pre = pre + b
        h = _activate(pre, spec.activation) if i < len(layers) - 1 else pre
        if i < len(layers) - 1:
            cache.append(h)
    return h, cache


def forward(params: Array, spec: MLPSpec, x: Array) -> Array:
    """Deterministic MLP evaluation; see forward_cached for shapes."""
    out, _ = forward_cached(params, spec, x)
    return out


def backward_from_cache(
    params: Array,
    spec: MLPSpec,
    cache: list[Array],
    upstream: Array,
    *,
    inputs_only: bool = False,
) -> tuple[Array | None, Array]:
    """Reverse pass for sum(upstream * output) given a forward cache.

    Returns (param_grads, input_grad). Gradients are summed over batch
    axes; param_grads is None when inputs_only is set.
    """
    layers = unpack(params, spec)
    grads = None if inputs_only else np.zeros_like(params)
    grad_views = None if inputs_only else unpack(grads, spec)
    delta = np.asarray(upstream, dtype=np.float64)
    squeeze = False
    if delta.ndim == 1:  # single-sample call: promote to a batch of one
        delta = delta[None, :]
        cache = [c[None, :] if c.ndim == 1 else c for c in cache]
        squeeze = True
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = cache[i]
        if not inputs_only:
            gw, gb = grad_views[i]
            np.add(gw, np.swapaxes(h_in, -1, -2) @ delta, out=gw)
            np.add(gb, delta.sum(axis=-2), out=gb)
        delta = delta @ np.swapaxes(w, -1, -2)
        if i > 0:
            delta = delta * _activation_grad_from_post(cache[i], spec.activation)
    input_grad = delta[0] if squeeze else delta
    return grads, input_grad


def backward(
    params: Array, spec: MLPSpec, x: Array, upstream: Array
) -> tuple[Array, Array]:
    """Exact gradients of sum(upstream * forward(params, spec, x)).

    Returns (param_grads, input_grad); param_grads matches the params
    shape, input_grad matches x.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != spec.output_dim:
        raise ValueError("upstream last dim must equal spec output_dim")
    _, cache = forward_cached(params, spec, x)
    grads, input_grad = backward_from_cache(params, spec, cache, upstream)
    return grads, input_grad


def input_gradient(params: Array, spec: MLPSpec, x: Array, upstream: Array) -> Array:
    """Gradient of sum(upstream * output) w.r.t. the input only."""
    _, cache = forward_cached(params, spec, x)
    _, gin = backward_from_cache(params, spec, cache, upstream, inputs_only=True)
    return gin


def softplus(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))


def tanh_log_jacobian(u: Array) -> Array:
    """log(1 - tanh(u)^2), numerically stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))


@dataclass(frozen=True)
class GaussianPolicyOutput:
    mean: Array
    log_std: Array
    action: Array
    log_prob: Array | float


def split_policy_head(out: Array) -> tuple[Array, Array]:
    """Split raw net output into (mean, clamped log_std)."""
    if out.shape[-1] % 2 != 0:
        raise ValueError("policy nets need output_dim = 2 * action_dim")
    d = out.shape[-1] // 2
    mean = out[..., :d]
    log_std = np.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def squashed_gaussian_from_noise(
    mean: Array, log_std: Array, eps: Array
) -> tuple[Array, Array, Array]:
    """Reparameterized tanh-Gaussian sample: returns (u, action, log_prob)."""
    u = mean + np.exp(log_std) * eps
    action = np.clip(np.tanh(u), -_TANH_BOUND, _TANH_BOUND)
    log_prob = (
        -0.5 * eps * eps - log_std - _LOG_SQRT_2PI - tanh_log_jacobian(u)
    ).sum(axis=-1)
    return u, action, log_prob


def sample_squashed_gaussian(
    params: Array, spec: MLPSpec, obs: Array, rng: np.random.Generator
) -> GaussianPolicyOutput:
    """Draw a tanh-squashed Gaussian action with its exact log density.

    obs may be a single vector or a batch (..., input_dim); action and
    log_prob broadcast accordingly. Actions are strictly inside (-1, 1).
    """
    out = forward(params, spec, obs)
    mean, log_std = split_policy_head(out)
    eps = rng.standard_normal(mean.shape)
    _, action, log_prob = squashed_gaussian_from_noise(mean, log_std, eps)
    return GaussianPolicyOutput(mean=mean, log_std=log_std, action=action, log_prob=log_prob)


def mean_action(params: Array, spec: MLPSpec, obs: Array) -> Array:
    """Deterministic head: tanh of the mean output."""
    out = forward(params, spec, obs)
    mean, _ = split_policy_head(out)
    return np.clip(np.tanh(mean), -_TANH_BOUND, _TANH_BOUND)


def polyak_update(target: Array, online: Array, rho: float) -> Array:
    """Elementwise rho * target + (1 - rho) * online."""
    if target.shape != online.shape:
        raise ValueError("polyak_update needs equal shapes")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    return rho * target + (1.0 - rho) * online


@dataclass(frozen=True)
class AdamState:
    m: Array
    v: Array
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(shape, lr: float) -> AdamState:
    return AdamState(m=np.zeros(shape), v=np.zeros(shape), step=0, lr=lr)


def adam_step(state: AdamState, params: Array, grads: Array) -> tuple[AdamState, Array]:
    """One bias-corrected Adam update; rejects non-finite gradients."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("gradient shape must match parameter shape")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradients")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_params


def relative_error(analytic: Array, numeric: Array) -> Array:
    """|a - n| scaled by max(|a|, |n|, 1): relative above 1, absolute below."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / denom


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: str


def finite_difference_grads(
    params: Array, spec: MLPSpec, x: Array, upstream: Array, step: float = 1e-5
) -> tuple[Array, Array]:
    """Central finite differences of sum(upstream * output), fp64."""

    def f(p, xi):
        return float(np.sum(forward(p, spec, xi) * upstream))

    pg = np.zeros_like(params)
    for i in range(params.size):
        p_hi = params.copy()
        p_hi[i] += step
        p_lo = params.copy()
        p_lo[i] -= step
        pg[i] = (f(p_hi, x) - f(p_lo, x)) / (2.0 * step)
    xg = np.zeros_like(x)
    flat = xg.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(xflat.size):
        x_hi = xflat.copy()
        x_hi[i] += step
        x_lo = xflat.copy()
        x_lo[i] -= step
        flat[i] = (f(params, x_hi.reshape(x.shape)) - f(params, x_lo.reshape(x.shape))) / (
            2.0 * step
        )
    return pg, xg


def grad_check(spec: MLPSpec, seed: int, tolerance: float) -> GradCheckReport:
    """Compare backward against central finite differences on random data."""
    if tolerance <= 0.0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    params = init_mlp(spec, seed)
    x = rng.standard_normal(spec.input_dim)
    upstream = rng.standard_normal(spec.output_dim)
    pg, xg = backward(params, spec, x, upstream)
    pg_fd, xg_fd = finite_difference_grads(params, spec, x, upstream)
    err_p = relative_error(pg, pg_fd)
    err_x = relative_error(xg, xg_fd)
    worst_p = int(np.argmax(err_p))
    worst_x = int(np.argmax(err_x))
    if err_p[worst_p] >= err_x[worst_x]:
        max_err, worst = float(err_p[worst_p]), f"param[{worst_p}]"
    else:
        max_err, worst = float(err_x[worst_x]), f"input[{worst_x}]"
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tolerance, worst=worst)
