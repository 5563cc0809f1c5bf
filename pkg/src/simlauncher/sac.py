"""Soft actor-critic learner with a critic ensemble and demo-aware targets.

The critic ensemble holds K online and K target parameter vectors of one
shared spec over concat(obs, action). TD targets use the min over a random
M-subset of target critics; the proposal-augmented target additionally
scores a BC candidate action and bootstraps through the better of the two.
One learner step performs G critic updates (each followed by a Polyak
target update) and then a single actor and temperature update on a fresh
stratified batch. The "SLCK" named-section checkpoint format lives here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nets
from .buffers import Batch, BufferStore, FormatError, sample_stratified
from .nets import AdamState, MLPSpec

Array = np.ndarray

SLCK_MAGIC = b"SLCK"
SLCK_VERSION = 1

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteLossError(RuntimeError):
    """A learner update produced a non-finite loss; the step is aborted."""


@dataclass(frozen=True)
class SacHypers:
    """Algorithm hyperparameters; defaults follow the study configuration."""

    gamma: float = 0.97
    rho: float = 0.995
    ensemble_size: int = 10  # K
    subsample: int = 2  # M, target-min subset
    gradient_steps: int = 4  # G per environment step
    batch_size: int = 256  # N
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not 1 <= self.subsample <= self.ensemble_size:
            raise ValueError("subsample must be in [1, ensemble_size]")
        if self.gradient_steps < 1:
            raise ValueError("gradient_steps must be >= 1")
        if self.batch_size < 4 or self.batch_size % 4:
            raise ValueError("batch_size must be >= 4 and divisible by 4")
        if min(self.lr_actor, self.lr_critic, self.lr_alpha) <= 0.0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class GaussianActor:
    """Squashed-Gaussian policy: params over an MLP with a 2d output head."""

    spec: MLPSpec
    params: Array

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim // 2

    def sample(self, obs: Array, rng: np.random.Generator) -> nets.GaussianPolicyOutput:
        return nets.sample_squashed_gaussian(self.params, self.spec, obs, rng)

    def mean_action(self, obs: Array) -> Array:
        return nets.mean_action(self.params, self.spec, obs)


@dataclass(frozen=True)
class CriticEnsemble:
    spec: MLPSpec
    online: Array  # (K, P)
    target: Array  # (K, P)

    def __post_init__(self):
        if self.online.shape != self.target.shape:
            raise ValueError("online/target shapes must match")
        if self.online.shape[-1] != self.spec.param_count:
            raise ValueError("ensemble width does not match the critic spec")

    @property
    def size(self) -> int:
        return self.online.shape[0]


def init_critic_ensemble(spec: MLPSpec, k: int, seed: int) -> CriticEnsemble:
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC71)))
    member_seeds = rng.integers(0, 2**63 - 1, size=k)
    online = np.stack([nets.init_mlp(spec, int(s)) for s in member_seeds])
    return CriticEnsemble(spec=spec, online=online, target=online.copy())


def q_values(ensemble: CriticEnsemble, obs: Array, action: Array, *, target: bool = False) -> Array:
    """Per-member Q(obs, action): (K,) for single inputs, (K, N) batched."""
    x = np.concatenate([np.asarray(obs, float), np.asarray(action, float)], axis=-1)
    params = ensemble.target if target else ensemble.online
    out = nets.forward(params, ensemble.spec, x)[..., 0]
    return out[..., 0] if x.ndim == 1 else out  # (K,) for single inputs


def subset_min(q: Array, indices: Array) -> float:
    """Min of q over an explicit member subset."""
    return float(np.min(np.asarray(q)[np.asarray(indices)]))


def draw_subset(k: int, m: int, rng: np.random.Generator) -> Array:
    if not 1 <= m <= k:
        raise ValueError("subset size out of range")
    return rng.choice(k, size=m, replace=False)


def subsampled_min(q: Array, m: int, rng: np.random.Generator) -> float:
    """Min over a uniformly random m-subset of the K critic values."""
    q = np.asarray(q)
    return subset_min(q, draw_subset(q.shape[0], m, rng))


def _min_target_q(critics: CriticEnsemble, next_obs: Array, actions: Array, idx: Array) -> Array:
    x = np.concatenate([next_obs, actions], axis=-1)
    q = nets.forward(critics.target[idx], critics.spec, x)[..., 0]  # (m, N)
    return q.min(axis=0)


def td_target_standard(
    batch: Batch,
    actor: GaussianActor,
    critics: CriticEnsemble,
    hypers: SacHypers,
    alpha: float,
    rng: np.random.Generator,
) -> Array:
    """Soft one-step target: r + gamma * (min-subset Q(s', a') - alpha log pi).

    Success-terminated transitions yield exactly r; truncated (timeout)
    transitions bootstrap.
    """
    pol = actor.sample(batch.next_obs, rng)
    idx = draw_subset(critics.size, hypers.subsample, rng)
    v = _min_target_q(critics, batch.next_obs, pol.action, idx) - alpha * pol.log_prob
    live = 1.0 - batch.terminated.astype(np.float64)
    return batch.reward + live * hypers.gamma * v


def td_target_proposal(
    batch: Batch,
    actor: GaussianActor,
    bc_policy,
    critics: CriticEnsemble,
    hypers: SacHypers,
    alpha: float,
    rng: np.random.Generator,
) -> Array:
    """Bootstrap through the better of the RL and BC candidate actions.

    Both candidates are scored with the same target subset; the entropy
    term applies only to the RL branch (the BC policy's density is not
    modeled). Shares the RNG consumption pattern of the standard target.
    """
    pol = actor.sample(batch.next_obs, rng)
    idx = draw_subset(critics.size, hypers.subsample, rng)
    a_bc = bc_policy.action(batch.next_obs)
    v_rl = _min_target_q(critics, batch.next_obs, pol.action, idx) - alpha * pol.log_prob
    v_bc = _min_target_q(critics, batch.next_obs, a_bc, idx)
    live = 1.0 - batch.terminated.astype(np.float64)
    return batch.reward + live * hypers.gamma * np.maximum(v_rl, v_bc)


def critic_update(
    critics: CriticEnsemble, opt: AdamState, batch: Batch, y: Array
) -> tuple[CriticEnsemble, AdamState, float]:
    """One Adam step per member on the MSE to fixed targets y."""
    x = np.concatenate([batch.obs, batch.action], axis=-1)
    out, cache = nets.forward_cached(critics.online, critics.spec, x)
    err = out[..., 0] - y  # (K, N)
    loss = float((err * err).mean())
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"critic loss {loss}")
    upstream = (2.0 / err.shape[1]) * err[..., None]
    grads, _ = nets.backward_from_cache(critics.online, critics.spec, cache, upstream)
    opt, online = nets.adam_step(opt, critics.online, grads)
    return replace(critics, online=online), opt, loss


@dataclass(frozen=True)
class ActorUpdateStats:
    loss: float
    log_probs: Array
    q_mean: float
    log_std_mean: float


def actor_loss_and_grads(
    params: Array,
    spec: MLPSpec,
    obs: Array,
    eps: Array,
    pair_params: Array,
    critic_spec: MLPSpec,
    alpha: float,
) -> tuple[float, Array, Array, Array]:
    """Reparameterized actor loss mean(alpha*logp - min-pair Q) and its gradient.

    Deterministic given the noise eps and the critic pair; the actor
    gradient is assembled by hand through the tanh-Gaussian head and the
    critics' input gradients.
    """
    out, cache = nets.forward_cached(params, spec, obs)
    d = spec.output_dim // 2
    mean, raw = out[..., :d], out[..., d:]
    log_std = np.clip(raw, nets.LOG_STD_MIN, nets.LOG_STD_MAX)
    std = np.exp(log_std)
    u, action, log_probs = nets.squashed_gaussian_from_noise(mean, log_std, eps)

    xq = np.concatenate([obs, action], axis=-1)
    qout, qcache = nets.forward_cached(pair_params, critic_spec, xq)
    q_pair = qout[..., 0]  # (pair, N)
    q_min = q_pair.min(axis=0)
    k_star = q_pair.argmin(axis=0)
    n = obs.shape[0]
    loss = float(np.mean(alpha * log_probs - q_min))

    # -(1/N) dQ/da routed through the per-element argmin member
    up_q = -(np.arange(pair_params.shape[0])[:, None] == k_star[None, :]).astype(float) / n
    _, gin = nets.backward_from_cache(
        pair_params, critic_spec, qcache, up_q[..., None], inputs_only=True
    )
    g_action = gin.sum(axis=0)[:, obs.shape[1] :]

    dl_du = g_action * (1.0 - action * action) + (alpha / n) * (2.0 * action)
    dl_dmean = dl_du
    dl_dlogstd = dl_du * (std * eps) - alpha / n
    clip_pass = (raw > nets.LOG_STD_MIN) & (raw < nets.LOG_STD_MAX)
    upstream = np.concatenate([dl_dmean, dl_dlogstd * clip_pass], axis=-1)
    grads, _ = nets.backward_from_cache(params, spec, cache, upstream)
    return loss, grads, log_probs, q_min, float(log_std.mean())


def actor_update(
    actor: GaussianActor,
    opt: AdamState,
    critics: CriticEnsemble,
    alpha: float,
    batch: Batch,
    rng: np.random.Generator,
) -> tuple[GaussianActor, AdamState, ActorUpdateStats]:
    """One gradient step on the reparameterized policy objective.

    Q is aggregated as the min over a random pair of online critics,
    re-drawn per update.
    """
    d = actor.action_dim
    eps = rng.standard_normal((len(batch), d))
    pair = draw_subset(critics.size, min(2, critics.size), rng)
    loss, grads, log_probs, q_min, log_std_mean = actor_loss_and_grads(
        actor.params, actor.spec, batch.obs, eps, critics.online[pair], critics.spec, alpha
    )
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"actor loss {loss}")
    opt, params = nets.adam_step(opt, actor.params, grads)
    stats = ActorUpdateStats(
        loss=loss, log_probs=log_probs, q_mean=float(q_min.mean()), log_std_mean=log_std_mean
    )
    return replace(actor, params=params), opt, stats


@dataclass(frozen=True)
class AlphaState:
    """Auto-tuned entropy temperature (alpha = exp(log_alpha))."""

    log_alpha: float
    target_entropy: float
    opt: AdamState

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


def init_alpha_state(
    action_dim: int, init_alpha: float, lr: float, target_entropy: float | None = None
) -> AlphaState:
    target = -float(action_dim) if target_entropy is None else float(target_entropy)
    return AlphaState(
        log_alpha=math.log(init_alpha), target_entropy=target, opt=nets.init_adam((), lr)
    )


def alpha_update(state: AlphaState, log_probs: Array) -> tuple[AlphaState, float]:
    """Move log_alpha toward matching the entropy target."""
    err = float(np.mean(log_probs) + state.target_entropy)
    grad = -state.alpha * err
    loss = grad
    opt, new_log_alpha = nets.adam_step(state.opt, np.asarray(state.log_alpha), np.asarray(grad))
    return replace(state, log_alpha=float(new_log_alpha), opt=opt), loss


@dataclass
class LearnerState:
    actor: GaussianActor
    critics: CriticEnsemble
    alpha: AlphaState
    actor_opt: AdamState
    critic_opt: AdamState
    hypers: SacHypers
    critic_updates: int = 0
    polyak_updates: int = 0
    actor_updates: int = 0
    alpha_updates: int = 0


def init_learner(
    obs_dim: int,
    action_dim: int,
    hypers: SacHypers,
    seed: int,
    *,
    actor_hidden: tuple[int, ...] = (32, 32),
    critic_hidden: tuple[int, ...] = (32, 32),
    init_alpha: float = 0.1,
    target_entropy: float | None = None,
) -> LearnerState:
    actor_spec = MLPSpec(obs_dim, actor_hidden, 2 * action_dim)
    critic_spec = MLPSpec(obs_dim + action_dim, critic_hidden, 1)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1EA)))
    actor = GaussianActor(actor_spec, nets.init_mlp(actor_spec, int(rng.integers(2**63 - 1))))
    critics = init_critic_ensemble(critic_spec, hypers.ensemble_size, int(rng.integers(2**63 - 1)))
    return LearnerState(
        actor=actor,
        critics=critics,
        alpha=init_alpha_state(action_dim, init_alpha, hypers.lr_alpha, target_entropy),
        actor_opt=nets.init_adam(actor.params.shape, hypers.lr_actor),
        critic_opt=nets.init_adam(critics.online.shape, hypers.lr_critic),
        hypers=hypers,
    )


def learner_step(
    state: LearnerState,
    replay: BufferStore,
    d_sim: BufferStore,
    d_real: BufferStore,
    fractions: tuple[float, float, float],
    rng: np.random.Generator,
    *,
    target_mode: str = "standard",
    bc_policy=None,
    reward_transform=None,
) -> dict:
    """G critic updates with Polyak target tracking, then one actor/alpha update.

    Every batch is drawn fresh by stratified sampling with the given
    fractions; the actor trains on its own batch after the critic loop.
    reward_transform(batch) -> rewards lets callers reshape rewards at
    batch time (stored transitions stay binary). Returns per-call metrics
    including the realized batch compositions.
    """
    if target_mode not in ("standard", "proposal"):
        raise ValueError("target_mode must be 'standard' or 'proposal'")
    if target_mode == "proposal" and bc_policy is None:
        raise ValueError("proposal target needs a bc_policy")
    h = state.hypers
    alpha_val = state.alpha.alpha
    critic_losses = []
    compositions = []
    for _ in range(h.gradient_steps):
        batch = sample_stratified(replay, d_sim, d_real, h.batch_size, fractions, rng)
        compositions.append(batch.counts)
        if reward_transform is not None:
            batch = replace(batch, reward=reward_transform(batch))
        if target_mode == "proposal":
            y = td_target_proposal(batch, state.actor, bc_policy, state.critics, h, alpha_val, rng)
        else:
            y = td_target_standard(batch, state.actor, state.critics, h, alpha_val, rng)
        state.critics, state.critic_opt, loss = critic_update(
            state.critics, state.critic_opt, batch, y
        )
        state.critics = replace(
            state.critics,
            target=nets.polyak_update(state.critics.target, state.critics.online, h.rho),
        )
        state.critic_updates += 1
        state.polyak_updates += 1
        critic_losses.append(loss)
    batch = sample_stratified(replay, d_sim, d_real, h.batch_size, fractions, rng)
    compositions.append(batch.counts)
    state.actor, state.actor_opt, stats = actor_update(
        state.actor, state.actor_opt, state.critics, alpha_val, batch, rng
    )
    state.alpha, alpha_loss = alpha_update(state.alpha, stats.log_probs)
    state.actor_updates += 1
    state.alpha_updates += 1
    return {
        "critic_loss": float(np.mean(critic_losses)),
        "actor_loss": stats.loss,
        "alpha_loss": alpha_loss,
        "alpha": state.alpha.alpha,
        "q_mean": stats.q_mean,
        "log_std_mean": stats.log_std_mean,
        "compositions": compositions,
    }


# ---------------------------------------------------------------------------
# SLCK checkpoint container: magic, u32 version, u32 section count, then per
# section a u32 name length, UTF-8 name, u64 element count, little-endian f64.


def save_sections(path, sections: dict[str, Array]) -> None:
    with open(path, "wb") as fh:
        fh.write(SLCK_MAGIC + struct.pack("<II", SLCK_VERSION, len(sections)))
        for name, arr in sections.items():
            data = np.ascontiguousarray(np.asarray(arr, dtype="<f8").reshape(-1))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


def load_sections(path) -> dict[str, Array]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != SLCK_MAGIC:
        raise FormatError("bad SLCK magic")
    version, n_sections = struct.unpack("<II", raw[4:12])
    if version != SLCK_VERSION:
        raise FormatError(f"unsupported SLCK version {version}")
    sections: dict[str, Array] = {}
    off = 12
    for _ in range(n_sections):
        if off + 4 > len(raw):
            raise FormatError("truncated SLCK section header")
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        try:
            name = raw[off : off + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("section name is not UTF-8") from exc
        if not name or len(raw[off : off + name_len]) != name_len:
            raise FormatError("corrupted section name")
        off += name_len
        if off + 8 > len(raw):
            raise FormatError("truncated SLCK section length")
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        end = off + count * 8
        if end > len(raw):
            raise FormatError("truncated SLCK section data")
        sections[name] = np.frombuffer(raw[off:end], dtype="<f8").copy()
        off = end
    if off != len(raw):
        raise FormatError("trailing bytes in SLCK file")
    return sections


def policy_sections(prefix: str, spec: MLPSpec, params: Array) -> dict[str, Array]:
    """Sections describing a single policy net (spec dims plus parameters)."""
    code = {"relu": 0.0, "tanh": 1.0}[spec.activation]
    dims = np.array([spec.input_dim, *spec.hidden_dims, spec.output_dim, code], dtype=np.float64)
    return {f"{prefix}_dims": dims, prefix: np.asarray(params, dtype=np.float64)}


def policy_from_sections(sections: dict[str, Array], prefix: str) -> tuple[MLPSpec, Array]:
    dims = sections[f"{prefix}_dims"]
    activation = "tanh" if dims[-1] == 1.0 else "relu"
    ints = [int(v) for v in dims[:-1]]
    spec = MLPSpec(ints[0], tuple(ints[1:-1]), ints[-1], activation=activation)
    params = sections[prefix]
    if params.size != spec.param_count:
        raise FormatError(f"{prefix} section does not match its dims")
    return spec, params


def learner_sections(state: LearnerState) -> dict[str, Array]:
    """Named checkpoint sections for a full learner state."""
    sections = policy_sections("actor", state.actor.spec, state.actor.params)
    k = state.critics.size
    code = {"relu": 0.0, "tanh": 1.0}[state.critics.spec.activation]
    sections["critic_dims"] = np.array(
        [state.critics.spec.input_dim, *state.critics.spec.hidden_dims,
         state.critics.spec.output_dim, code], dtype=np.float64,
    )
    for i in range(k):
        sections[f"critic_{i}"] = state.critics.online[i]
        sections[f"target_{i}"] = state.critics.target[i]
    sections["alpha"] = np.array([state.alpha.log_alpha, state.alpha.target_entropy])
    sections["alpha_opt_m"] = np.atleast_1d(state.alpha.opt.m)
    sections["alpha_opt_v"] = np.atleast_1d(state.alpha.opt.v)
    sections["actor_opt_m"] = state.actor_opt.m
    sections["actor_opt_v"] = state.actor_opt.v
    sections["critic_opt_m"] = state.critic_opt.m
    sections["critic_opt_v"] = state.critic_opt.v
    sections["opt_steps"] = np.array(
        [state.actor_opt.step, state.critic_opt.step, state.alpha.opt.step], dtype=np.float64
    )
    sections["counters"] = np.array(
        [state.critic_updates, state.polyak_updates, state.actor_updates, state.alpha_updates],
        dtype=np.float64,
    )
    return sections


def restore_learner(sections: dict[str, Array], hypers: SacHypers) -> LearnerState:
    actor_spec, actor_params = policy_from_sections(sections, "actor")
    dims = sections["critic_dims"]
    ints = [int(v) for v in dims[:-1]]
    critic_spec = MLPSpec(ints[0], tuple(ints[1:-1]), ints[-1],
                          activation="tanh" if dims[-1] == 1.0 else "relu")
    k = hypers.ensemble_size
    try:
        online = np.stack([sections[f"critic_{i}"] for i in range(k)])
        target = np.stack([sections[f"target_{i}"] for i in range(k)])
    except KeyError as exc:
        raise FormatError(f"missing checkpoint section {exc}") from exc
    steps = sections["opt_steps"]
    counters = sections["counters"]
    alpha_sec = sections["alpha"]
    state = LearnerState(
        actor=GaussianActor(actor_spec, actor_params),
        critics=CriticEnsemble(critic_spec, online, target),
        alpha=AlphaState(
            log_alpha=float(alpha_sec[0]),
            target_entropy=float(alpha_sec[1]),
            opt=AdamState(
                m=sections["alpha_opt_m"][0], v=sections["alpha_opt_v"][0],
                step=int(steps[2]), lr=hypers.lr_alpha,
            ),
        ),
        actor_opt=AdamState(
            m=sections["actor_opt_m"], v=sections["actor_opt_v"],
            step=int(steps[0]), lr=hypers.lr_actor,
        ),
        critic_opt=AdamState(
            m=sections["critic_opt_m"].reshape(k, -1),
            v=sections["critic_opt_v"].reshape(k, -1),
            step=int(steps[1]), lr=hypers.lr_critic,
        ),
        hypers=hypers,
        critic_updates=int(counters[0]),
        polyak_updates=int(counters[1]),
        actor_updates=int(counters[2]),
        alpha_updates=int(counters[3]),
    )
    return state
