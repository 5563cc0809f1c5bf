"""Twin toy manipulation tasks: a nominal "sim" variant and a gapped "real" one.

Three sparse-reward continuous-control tasks on the unit workspace
[-1, 1]^2, controlled by bounded per-step deltas:

* push_place   — reach a randomly placed object, grab it, carry it to a
                 fixed goal zone, release inside.
* peg_insert   — grab a peg and thread it through a narrow slot in a wall;
                 success requires lateral alignment within the slot
                 half-width and sufficient insertion depth.
* highdim_grasp — drive 9 actuator values into a latent closure pattern
                 while raising a lift coordinate (12-D action space).

The "real" variant of each task applies a GapConfig: additive observation
bias, Gaussian observation noise, an action gain, constant per-step drift,
and action latency. The sim variant ignores the gap entirely. Reward is
binary and success-coupled; episodes truncate at a fixed horizon.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

TASKS = ("push_place", "peg_insert", "highdim_grasp")
VARIANTS = ("sim", "real")

HORIZON = 100
MAX_STEP = 0.08
GRAB_RADIUS = 0.05
MAX_LATENCY = 3

# fixed 9-dim finger closure pattern for highdim_grasp
CLOSURE_PATTERN = np.array([0.62, -0.44, 0.53, -0.37, 0.58, -0.49, 0.41, -0.56, 0.47])
CLOSURE_BAND = 0.15
CLOSURE_REQUIRED = 6
LIFT_SUCCESS = 0.25


@dataclass(frozen=True)
class TaskSpec:
    """Read-only task constants, exposed for manifests and tests."""

    name: str
    action_dim: int
    agent_dim: int  # planar position, plus lift for highdim_grasp
    obs_dim: int
    agent_start: tuple[float, ...]
    spawn_center: tuple[float, float]
    spawn_half: float
    goal: tuple[float, float] | None = None
    goal_radius: float = 0.0
    slot_x: float = 0.0
    wall_y: float = 0.0
    slot_half_width: float = 0.0
    insert_depth: float = 0.0
    horizon: int = HORIZON
    max_step: float = MAX_STEP
    grab_radius: float = GRAB_RADIUS

    @property
    def feature_map(self) -> Array:
        # fixed observation feature map (identity at desk scale)
        return np.ones(self.obs_dim)

    @property
    def object_slice(self) -> slice:
        # object position dims inside the privileged/observation vector
        return slice(self.agent_dim, self.agent_dim + 2)


TASK_SPECS: dict[str, TaskSpec] = {
    "push_place": TaskSpec(
        name="push_place",
        action_dim=3,  # dx, dy, grab
        agent_dim=2,
        obs_dim=5,  # agent xy, object xy, held
        agent_start=(-0.6, -0.6),
        spawn_center=(0.0, 0.0),
        spawn_half=0.25,
        goal=(0.6, 0.6),
        goal_radius=0.12,
    ),
    "peg_insert": TaskSpec(
        name="peg_insert",
        action_dim=3,  # dx, dy, grab
        agent_dim=2,
        obs_dim=5,
        agent_start=(-0.6, -0.6),
        spawn_center=(0.0, -0.3),
        spawn_half=0.20,
        slot_x=0.0,
        wall_y=0.55,
        slot_half_width=0.03,
        insert_depth=0.05,
    ),
    "highdim_grasp": TaskSpec(
        name="highdim_grasp",
        action_dim=12,  # dx, dy, dlift, 9 actuator deltas
        agent_dim=3,
        obs_dim=15,  # agent xyl, object xy, held, 9 actuators
        agent_start=(-0.6, -0.6, 0.0),
        spawn_center=(0.0, 0.0),
        spawn_half=0.25,
    ),
}


@dataclass(frozen=True)
class GapConfig:
    """Sim-to-"real" perturbation parameters.

    obs_bias is added per observation dimension (scalar broadcasts);
    action_gain multiplies applied actions; drift is added to the agent's
    planar position every step; latency delays commanded actions.
    """

    obs_bias: Array | float = 0.0
    obs_noise_std: float = 0.0
    action_gain: float = 1.0
    drift: Array | float = 0.0
    latency_steps: int = 0

    def __post_init__(self):
        if self.obs_noise_std < 0.0:
            raise ValueError("obs_noise_std must be >= 0")
        if self.action_gain <= 0.0:
            raise ValueError("action_gain must be > 0")
        if not 0 <= int(self.latency_steps) <= MAX_LATENCY:
            raise ValueError(f"latency_steps must be in [0, {MAX_LATENCY}]")
        bias = np.atleast_1d(np.asarray(self.obs_bias, dtype=np.float64))
        drift = np.atleast_1d(np.asarray(self.drift, dtype=np.float64))
        if not (np.all(np.isfinite(bias)) and np.all(np.isfinite(drift))):
            raise ValueError("gap values must be finite")
        object.__setattr__(self, "obs_bias", bias if bias.size > 1 else float(bias[0]))
        object.__setattr__(self, "drift", drift if drift.size > 1 else float(drift[0]))

    @classmethod
    def identity(cls) -> "GapConfig":
        return cls()

    @property
    def is_identity(self) -> bool:
        return (
            np.all(np.asarray(self.obs_bias) == 0.0)
            and self.obs_noise_std == 0.0
            and self.action_gain == 1.0
            and np.all(np.asarray(self.drift) == 0.0)
            and self.latency_steps == 0
        )


def default_gap(
    task: str,
    seed,
    *,
    bias_magnitude: float = 0.02,
    obs_noise_std: float = 0.01,
    action_gain: float = 0.9,
    latency_steps: int = 1,
    drift: float = 0.0,
) -> GapConfig:
    """Default study gap: per-dimension random-sign bias of fixed magnitude."""
    spec = TASK_SPECS[task]
    rng = np.random.default_rng(np.random.SeedSequence(_seed_entropy(seed, 0x6A9)))
    signs = rng.integers(0, 2, size=spec.obs_dim) * 2 - 1
    return GapConfig(
        obs_bias=signs * bias_magnitude,
        obs_noise_std=obs_noise_std,
        action_gain=action_gain,
        drift=drift,
        latency_steps=latency_steps,
    )


@dataclass
class EnvState:
    agent: Array
    obj: Array
    held: bool
    actuators: Array | None
    t: int


@dataclass(frozen=True)
class StepResult:
    obs: Array
    reward: int
    terminated: bool
    truncated: bool
    success: bool


def _seed_entropy(seed, stream: int):
    if isinstance(seed, (tuple, list)):
        return (*[int(s) for s in seed], stream)
    return (int(seed), stream)


class Env:
    """Single-owner mutable environment; see make_env."""

    def __init__(self, task: str, variant: str, gap: GapConfig, seed):
        self.task = task
        self.variant = variant
        self.spec = TASK_SPECS[task]
        self.gap = gap if variant == "real" else GapConfig.identity()
        if variant == "real":
            bias = np.asarray(self.gap.obs_bias)
            if bias.ndim == 1 and bias.size not in (1, self.spec.obs_dim):
                raise ValueError(
                    f"obs_bias length {bias.size} != obs dim {self.spec.obs_dim}"
                )
        self.state: EnvState | None = None
        self._pending: deque[Array] = deque()
        self._seed_streams(seed)

    def _seed_streams(self, seed) -> None:
        # independent streams so noise consumption never shifts reset draws
        self._reset_rng = np.random.default_rng(np.random.SeedSequence(_seed_entropy(seed, 0)))
        self._noise_rng = np.random.default_rng(np.random.SeedSequence(_seed_entropy(seed, 1)))

    def reset(self, seed=None) -> Array:
        """Fresh episode: fixed agent start, uniformly random object position."""
        if seed is not None:
            self._seed_streams(seed)
        spec = self.spec
        obj = np.asarray(spec.spawn_center) + self._reset_rng.uniform(
            -spec.spawn_half, spec.spawn_half, size=2
        )
        actuators = np.zeros(9) if self.task == "highdim_grasp" else None
        self.state = EnvState(
            agent=np.asarray(spec.agent_start, dtype=np.float64).copy(),
            obj=obj,
            held=False,
            actuators=actuators,
            t=0,
        )
        self._pending = deque(
            [np.zeros(spec.action_dim) for _ in range(self.gap.latency_steps)]
        )
        return self.observe()

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("step before reset")
        spec = self.spec
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (spec.action_dim,):
            raise ValueError(
                f"action shape {action.shape} != ({spec.action_dim},) for {self.task}"
            )
        a = np.clip(action, -1.0, 1.0)
        if self.gap.latency_steps > 0:
            self._pending.append(a)
            a = self._pending.popleft()
        a = a * self.gap.action_gain

        s = self.state
        delta = a[: spec.agent_dim] * MAX_STEP
        new_agent = s.agent.copy()
        new_agent[:2] += delta[:2] + np.asarray(self.gap.drift)
        if spec.agent_dim == 3:
            new_agent[2] += delta[2]
        new_agent = np.clip(new_agent, -1.0, 1.0)

        if self.task == "peg_insert":
            # slot geometry: above the wall the agent is confined to the slot
            # opening; crossing upward requires lateral alignment
            if s.agent[1] > spec.wall_y:
                new_agent[0] = np.clip(
                    new_agent[0],
                    spec.slot_x - spec.slot_half_width,
                    spec.slot_x + spec.slot_half_width,
                )
            elif (
                new_agent[1] > spec.wall_y
                and abs(new_agent[0] - spec.slot_x) > spec.slot_half_width
            ):
                new_agent[1] = spec.wall_y

        s.agent = new_agent
        if s.held:
            s.obj = new_agent[:2].copy()

        if self.task in ("push_place", "peg_insert"):
            grab = a[2]
            if s.held and grab <= 0.0:
                s.held = False
            elif (
                not s.held
                and grab > 0.0
                and np.linalg.norm(s.agent[:2] - s.obj) <= GRAB_RADIUS
            ):
                s.held = True
                s.obj = s.agent[:2].copy()
        else:
            s.actuators = np.clip(s.actuators + a[3:] * MAX_STEP, -1.0, 1.0)

        s.t += 1
        success = self._success()
        terminated = success
        truncated = (not success) and s.t >= HORIZON
        return StepResult(
            obs=self.observe(),
            reward=1 if success else 0,
            terminated=terminated,
            truncated=truncated,
            success=success,
        )

    def _success(self) -> bool:
        s = self.state
        spec = self.spec
        if self.task == "push_place":
            return (not s.held) and (
                np.linalg.norm(s.obj - np.asarray(spec.goal)) <= spec.goal_radius
            )
        if self.task == "peg_insert":
            return (
                abs(s.obj[0] - spec.slot_x) <= spec.slot_half_width
                and s.obj[1] - spec.wall_y >= spec.insert_depth
            )
        matched = int(np.sum(np.abs(s.actuators - CLOSURE_PATTERN) <= CLOSURE_BAND))
        return matched >= CLOSURE_REQUIRED and s.agent[2] >= LIFT_SUCCESS

    def privileged_state(self) -> Array:
        """Exact noiseless state vector (positions, held flag, actuators)."""
        s = self.state
        parts = [s.agent, s.obj, [1.0 if s.held else 0.0]]
        if s.actuators is not None:
            parts.append(s.actuators)
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def observe(self) -> Array:
        """Feature-mapped state; the real variant adds bias and noise."""
        obs = self.privileged_state() * self.spec.feature_map
        if self.variant == "real":
            obs = obs + np.asarray(self.gap.obs_bias)
            if self.gap.obs_noise_std > 0.0:
                obs = obs + self._noise_rng.standard_normal(obs.size) * self.gap.obs_noise_std
        return obs


def make_env(task: str, variant: str, gap: GapConfig | None = None, seed=0) -> Env:
    """Build a task environment; the sim variant ignores the gap."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return Env(task, variant, gap or GapConfig.identity(), seed)


def scripted_action(env: Env) -> Array:
    """Deterministic oracle controller reading the privileged state.

    Proportional control toward stage targets; robust to the default gap
    (gain/latency) because commands shrink near targets.
    """
    s = env.state
    spec = env.spec
    if env.task == "push_place":
        a = np.zeros(3)
        if not s.held:
            a[:2] = np.clip((s.obj - s.agent[:2]) / MAX_STEP, -1.0, 1.0)
            a[2] = 1.0
        else:
            goal = np.asarray(spec.goal)
            a[:2] = np.clip((goal - s.agent[:2]) / MAX_STEP, -1.0, 1.0)
            a[2] = 1.0 if np.linalg.norm(s.obj - goal) > 0.5 * spec.goal_radius else -1.0
        return a
    if env.task == "peg_insert":
        a = np.zeros(3)
        if not s.held:
            a[:2] = np.clip((s.obj - s.agent[:2]) / MAX_STEP, -1.0, 1.0)
            a[2] = 1.0
            return a
        a[2] = 1.0
        if abs(s.agent[0] - spec.slot_x) > 0.015 and s.agent[1] <= spec.wall_y:
            target = np.array([spec.slot_x, spec.wall_y - 0.04])
        else:
            target = np.array([spec.slot_x, spec.wall_y + spec.insert_depth + 0.03])
        a[:2] = np.clip((target - s.agent[:2]) / MAX_STEP, -1.0, 1.0)
        return a
    a = np.zeros(12)
    a[:2] = np.clip((s.obj - s.agent[:2]) / MAX_STEP, -1.0, 1.0)
    a[3:] = np.clip((CLOSURE_PATTERN - s.actuators) / MAX_STEP, -1.0, 1.0)
    matched = int(np.sum(np.abs(s.actuators - CLOSURE_PATTERN) <= 0.5 * CLOSURE_BAND))
    if matched >= 8:
        a[2] = np.clip((LIFT_SUCCESS + 0.05 - s.agent[2]) / MAX_STEP, 0.0, 1.0)
    return a
