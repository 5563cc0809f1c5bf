"""Simulation pretraining pipeline: state-based RL, demo collection, BC distillation.

Stages run sequentially and deterministically given their seeds:

1. train_state_policy — SAC (K=2, standard target) on privileged state
   vectors. Stored rewards stay binary; learning uses a potential-based
   shaping term computed at batch time from the privileged observations,
   which leaves optimal policies unchanged but makes the multi-stage
   sparse tasks explorable at desk scale.
2. collect_demos — success-only rollouts of the final policy, or "hybrid"
   rollouts spread uniformly across the 10 training checkpoints (kept
   regardless of outcome). Demo observations come from observe(), not the
   privileged vector.
3. bc_train — distill the demos into a deterministic tanh-head policy on
   the observation space by mean-squared error.
4. collect_real_demos — roll the BC policy in the real variant, keeping
   successful trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nets, sac
from .buffers import (
    DEMO_CAPACITY,
    BufferStore,
    SourceTag,
    Trajectory,
    Transition,
)
from .envs import CLOSURE_PATTERN, LIFT_SUCCESS, TASK_SPECS, Env, scripted_action
from .nets import MLPSpec
from .sac import GaussianActor, LearnerState, SacHypers

Array = np.ndarray

DEMO_MODES = ("success_only", "hybrid")

N_CHECKPOINTS = 10
PRETRAIN_WARMUP = 1000
SUCCESS_RATE_FLOOR = 0.05
SUCCESS_ATTEMPT_WINDOW = 1000
REAL_DEMO_ATTEMPT_FACTOR = 100


class DemoCollectionError(RuntimeError):
    """Demo collection could not reach its quota."""

    def __init__(self, msg: str, achieved: int, attempts: int):
        super().__init__(msg)
        self.achieved = achieved
        self.attempts = attempts


@dataclass(frozen=True)
class BcPolicy:
    """Deterministic imitation policy: tanh(MLP(obs)) in (-1, 1)^d."""

    spec: MLPSpec
    params: Array

    def action(self, obs: Array) -> Array:
        out = nets.forward(self.params, self.spec, obs)
        return np.clip(np.tanh(out), -nets._TANH_BOUND, nets._TANH_BOUND)


def pretrain_hypers(**overrides) -> SacHypers:
    """Plain SAC settings for state-based pretraining (K=2, UTD 1).

    Learning rates are hotter than the online defaults: the shaped
    pretraining problem is dense and the nets are tiny, and the desk-scale
    budget (60k steps, single core) needs convergence by mid-run.
    """
    base = dict(ensemble_size=2, subsample=2, gradient_steps=1,
                lr_actor=1e-3, lr_critic=1e-3, lr_alpha=3e-4)
    base.update(overrides)
    return SacHypers(**base)


# ---------------------------------------------------------------------------
# Potential-based shaping over privileged observation vectors.


SUCCESS_REWARD_SCALE = 5.0


def shaping_potential(task: str, obs: Array) -> Array:
    """Phi(s) per row of a privileged-observation batch."""
    obs = np.atleast_2d(obs)
    spec = TASK_SPECS[task]
    if task == "push_place":
        agent, obj, held = obs[:, 0:2], obs[:, 2:4], obs[:, 4]
        reach = np.linalg.norm(agent - obj, axis=1)
        carry = np.linalg.norm(obj - np.asarray(spec.goal), axis=1)
        return 2.0 * held - reach * (1.0 - held) - carry
    if task == "peg_insert":
        agent, obj, held = obs[:, 0:2], obs[:, 2:4], obs[:, 4]
        target = np.array([spec.slot_x, spec.wall_y + spec.insert_depth + 0.02])
        reach = np.linalg.norm(agent - obj, axis=1)
        carry = np.linalg.norm(obj - target, axis=1)
        return 2.0 * held - reach * (1.0 - held) - carry
    lift, act = obs[:, 2], obs[:, 6:15]
    closure = np.abs(act - CLOSURE_PATTERN).mean(axis=1)
    return -2.0 * closure - np.maximum(0.0, (LIFT_SUCCESS + 0.05) - lift)


def shaped_rewards(task: str, gamma: float):
    """Batch-time transform scale*r + gamma*Phi(s') - Phi(s), terminal-safe.

    Potential-based, so optimal policies match the sparse objective; the
    sparse term is scaled so the success terminal stays clearly positive
    against the held-state potential.
    """

    def transform(batch):
        phi = shaping_potential(task, batch.obs)
        phi_next = shaping_potential(task, batch.next_obs)
        live = 1.0 - batch.terminated.astype(np.float64)
        return SUCCESS_REWARD_SCALE * batch.reward + gamma * phi_next * live - phi

    return transform


# ---------------------------------------------------------------------------
# Rollouts.


def rollout_episode(env: Env, act_fn, reset_seed, source: SourceTag) -> Trajectory:
    """One episode; act_fn(env, obs) -> action. Records observe() views."""
    obs = env.reset(seed=reset_seed)
    transitions = []
    while True:
        action = np.clip(np.asarray(act_fn(env, obs), dtype=np.float64), -1.0, 1.0)
        res = env.step(action)
        transitions.append(
            Transition(obs, action, res.reward, res.obs, res.terminated, res.truncated, source)
        )
        obs = res.obs
        if res.terminated or res.truncated:
            return Trajectory.from_transitions(transitions)


def state_policy_act(actor: GaussianActor, rng: np.random.Generator | None = None):
    """Privileged-input controller; stochastic when an rng is supplied."""

    def act(env, obs):
        priv = env.privileged_state()
        if rng is None:
            return actor.mean_action(priv)
        return actor.sample(priv, rng).action

    return act


def bc_act(policy: BcPolicy):
    return lambda env, obs: policy.action(obs)


def oracle_act(env, obs):
    return scripted_action(env)


def evaluate_success(env: Env, act_fn, episodes: int, seed) -> float:
    """Deterministic evaluation: fresh resets, success fraction."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    wins = 0
    for i in range(episodes):
        wins += rollout_episode(env, act_fn, (_as_seed_tuple(seed)) + (i,), SourceTag.REPLAY).success
    return wins / episodes


def _as_seed_tuple(seed) -> tuple:
    return tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)


# ---------------------------------------------------------------------------
# Stage 1: state-based RL with privileged input.


@dataclass
class StatePolicyResult:
    actor: GaussianActor
    checkpoints: list[GaussianActor]
    checkpoint_steps: list[int]
    reached: bool
    eval_success: float
    learner: LearnerState


def train_state_policy(
    task: str,
    env: Env,
    budget: int,
    seed: int,
    *,
    hypers: SacHypers | None = None,
    hidden: tuple[int, ...] = (32, 32),
    init_alpha: float = 0.2,
    target_entropy: float = -1.0,
    eval_episodes: int = 50,
    eval_env: Env | None = None,
    warmup: int = PRETRAIN_WARMUP,
    success_threshold: float = 0.9,
) -> StatePolicyResult:
    """SAC on privileged state; checkpoints at 10 uniform budget fractions.

    A final-policy evaluation below the success threshold flags the run as
    failed (reached=False) without raising.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    spec = TASK_SPECS[task]
    h = hypers or pretrain_hypers()
    learner = sac.init_learner(
        spec.obs_dim, spec.action_dim, h, seed,
        actor_hidden=hidden, critic_hidden=hidden,
        init_alpha=init_alpha, target_entropy=target_entropy,
    )
    replay = BufferStore(max(budget, 2))
    empty = BufferStore(1)
    transform = shaped_rewards(task, h.gamma)
    checkpoint_steps = [(k * budget) // N_CHECKPOINTS for k in range(1, N_CHECKPOINTS + 1)]
    checkpoints: list[GaussianActor] = []
    env_step = 0
    episode = 0
    base = _as_seed_tuple(seed)
    while env_step < budget:
        env.reset(seed=base + (episode, 0))
        act_rng = np.random.default_rng(np.random.SeedSequence(base + (episode, 1)))
        lrn_rng = np.random.default_rng(np.random.SeedSequence(base + (episode, 2)))
        done = False
        while not done and env_step < budget:
            priv = env.privileged_state()
            if env_step < warmup:
                action = act_rng.uniform(-1.0, 1.0, spec.action_dim)
            else:
                action = learner.actor.sample(priv, act_rng).action
            res = env.step(action)
            replay.push(
                Transition(priv, action, res.reward, env.privileged_state(),
                           res.terminated, res.truncated, SourceTag.REPLAY)
            )
            if env_step >= warmup:
                sac.learner_step(
                    learner, replay, empty, empty, (1.0, 0.0, 0.0), lrn_rng,
                    reward_transform=transform,
                )
            env_step += 1
            while len(checkpoints) < N_CHECKPOINTS and env_step >= checkpoint_steps[len(checkpoints)]:
                checkpoints.append(replace(learner.actor))
            done = res.terminated or res.truncated
        episode += 1
    ev = eval_env or env
    success = evaluate_success(
        ev, state_policy_act(learner.actor), eval_episodes, base + (0xE7A1,)
    )
    return StatePolicyResult(
        actor=learner.actor,
        checkpoints=checkpoints,
        checkpoint_steps=checkpoint_steps,
        reached=success >= success_threshold,
        eval_success=success,
        learner=learner,
    )


# ---------------------------------------------------------------------------
# Stage 2: demo collection.


def collect_demos(
    policy,
    env: Env,
    n_traj: int,
    mode: str,
    seed,
    *,
    tag: SourceTag = SourceTag.SIM_DEMO,
    capacity: int | None = None,
) -> BufferStore:
    """Collect demonstration trajectories from the sim policy.

    success_only keeps successful final-policy rollouts until n_traj are
    stored (aborting if the success rate is still below 5% after 1000
    attempts). hybrid spreads n_traj evenly across the checkpoint list and
    keeps every rollout, reward-labeled, sampling actions stochastically.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if mode not in DEMO_MODES:
        raise ValueError(f"mode must be one of {DEMO_MODES}")
    buf = BufferStore(capacity or DEMO_CAPACITY)
    base = _as_seed_tuple(seed)
    if mode == "success_only":
        actor = policy if isinstance(policy, GaussianActor) else policy[-1]
        act = state_policy_act(actor)
        collected = attempts = successes = 0
        while collected < n_traj:
            traj = rollout_episode(env, act, base + (attempts,), tag)
            attempts += 1
            if traj.success:
                successes += 1
                collected += 1
                buf.extend(traj.transitions)
            if attempts == SUCCESS_ATTEMPT_WINDOW and successes / attempts < SUCCESS_RATE_FLOOR:
                raise DemoCollectionError(
                    f"success rate {successes}/{attempts} below "
                    f"{SUCCESS_RATE_FLOOR:.0%} after {attempts} attempts",
                    achieved=collected, attempts=attempts,
                )
        return buf
    checkpoints = list(policy)
    if not checkpoints:
        raise ValueError("hybrid collection needs a checkpoint list")
    quota, extra = divmod(n_traj, len(checkpoints))
    for ci, actor in enumerate(checkpoints):
        rng = np.random.default_rng(np.random.SeedSequence(base + (ci, 1)))
        act = state_policy_act(actor, rng)
        for j in range(quota + (1 if ci < extra else 0)):
            traj = rollout_episode(env, act, base + (ci, j, 0), tag)
            buf.extend(traj.transitions)
    return buf


def collect_real_demos(bc: BcPolicy, env: Env, n_success: int, seed) -> BufferStore:
    """Roll the BC policy in the real variant; keep successes only."""
    if n_success < 1:
        raise ValueError("n_success must be >= 1")
    buf = BufferStore(DEMO_CAPACITY)
    base = _as_seed_tuple(seed)
    cap = REAL_DEMO_ATTEMPT_FACTOR * n_success
    collected = attempts = 0
    act = bc_act(bc)
    while collected < n_success:
        if attempts >= cap:
            raise DemoCollectionError(
                f"collected {collected}/{n_success} successes in {attempts} attempts",
                achieved=collected, attempts=attempts,
            )
        traj = rollout_episode(env, act, base + (attempts,), SourceTag.REAL_DEMO)
        attempts += 1
        if traj.success:
            collected += 1
            buf.extend(traj.transitions)
    return buf


def collect_oracle_demos(
    env: Env, n_success: int, seed, *, tag: SourceTag = SourceTag.REAL_DEMO
) -> BufferStore:
    """Scripted-controller demos (debug source and the human-demo analog)."""
    buf = BufferStore(DEMO_CAPACITY)
    base = _as_seed_tuple(seed)
    cap = REAL_DEMO_ATTEMPT_FACTOR * n_success
    collected = attempts = 0
    while collected < n_success:
        if attempts >= cap:
            raise DemoCollectionError(
                f"oracle collected {collected}/{n_success}", achieved=collected, attempts=attempts
            )
        traj = rollout_episode(env, oracle_act, base + (attempts,), tag)
        attempts += 1
        if traj.success:
            collected += 1
            buf.extend(traj.transitions)
    return buf


# ---------------------------------------------------------------------------
# Stage 3: behavior cloning.


@dataclass(frozen=True)
class BcTrainResult:
    policy: BcPolicy
    final_loss: float


def bc_train(
    demos: BufferStore,
    spec: MLPSpec | None = None,
    epochs: int = 150,
    seed: int = 0,
    *,
    hidden: tuple[int, ...] = (64, 64),
    lr: float = 1e-3,
    batch_size: int = 256,
) -> BcTrainResult:
    """Fit tanh-bounded actions to demo actions by MSE; deterministic per seed."""
    if len(demos) == 0:
        raise ValueError("bc_train needs a nonempty demo buffer")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    data = demos.gather(np.arange(len(demos)), (0, 0, 0))
    x, a = data.obs, data.action
    spec = spec or MLPSpec(x.shape[1], hidden, a.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xBC)))
    params = nets.init_mlp(spec, int(rng.integers(2**63 - 1)))
    opt = nets.init_adam(params.shape, lr)
    n = x.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            out, cache = nets.forward_cached(params, spec, x[idx])
            pred = np.tanh(out)
            err = pred - a[idx]
            upstream = 2.0 * err * (1.0 - pred * pred) / err.size
            grads, _ = nets.backward_from_cache(params, spec, cache, upstream)
            opt, params = nets.adam_step(opt, params, grads)
    final_pred = np.tanh(nets.forward(params, spec, x))
    final_loss = float(((final_pred - a) ** 2).mean())
    return BcTrainResult(policy=BcPolicy(spec, params), final_loss=final_loss)


# ---------------------------------------------------------------------------
# Coverage analysis.


def object_coverage_cells(buffer: BufferStore, task: str, grid: int = 20) -> int:
    """Distinct workspace grid cells visited by the object across stored obs."""
    if len(buffer) == 0:
        return 0
    spec = TASK_SPECS[task]
    data = buffer.gather(np.arange(len(buffer)), (0, 0, 0))
    pos = data.obs[:, spec.object_slice]
    cells = np.clip(((pos + 1.0) / 2.0 * grid).astype(int), 0, grid - 1)
    return len({(int(cx), int(cy)) for cx, cy in cells})
