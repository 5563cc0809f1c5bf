"""Boltzmann action proposal between the RL actor and the BC policy.

Per step, both policies propose an action; each candidate is scored by the
mean of the online critic ensemble and the BC candidate is chosen with
probability logistic(beta * (q_bc - q_rl)). The inverse temperature beta
doubles geometrically with env steps and switches to a hard argmax once it
exceeds beta_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sac import CriticEnsemble, GaussianActor, q_values

ARGMAX = math.inf


@dataclass(frozen=True)
class BetaSchedule:
    """beta(t) = beta0 * 2^(t / doubling_steps), argmax once above beta_max."""

    beta0: float = 50.0
    doubling_steps: int = 3000
    beta_max: float = 1e6

    def __post_init__(self):
        if self.beta0 <= 0.0:
            raise ValueError("beta0 must be positive")
        if self.doubling_steps < 1:
            raise ValueError("doubling_steps must be >= 1")
        if self.beta_max <= self.beta0:
            raise ValueError("beta_max must exceed beta0")


def beta_at(schedule: BetaSchedule, env_step: int) -> float:
    """Inverse temperature at an env step; math.inf marks argmax mode."""
    if env_step < 0:
        raise ValueError("env_step must be >= 0")
    ratio = env_step / schedule.doubling_steps
    if ratio > math.log2(schedule.beta_max / schedule.beta0):
        return ARGMAX
    return schedule.beta0 * 2.0**ratio


def logistic(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class ProposalDecision:
    action: np.ndarray
    source: str  # "rl" | "bc"
    q_rl: float
    q_bc: float
    p_bc: float
    beta: float


def boltzmann_choice(
    q_rl: float, q_bc: float, beta: float, rng: np.random.Generator
) -> tuple[str, float]:
    """Two-candidate softmax pick: returns (source, p_bc).

    In argmax mode (beta = inf) the higher-scoring candidate wins and ties
    go to the RL action.
    """
    if math.isinf(beta):
        pick = "bc" if q_bc > q_rl else "rl"
        return pick, 1.0 if pick == "bc" else 0.0
    p_bc = logistic(beta * (q_bc - q_rl))
    return ("bc" if rng.uniform() < p_bc else "rl"), p_bc


def propose(
    obs: np.ndarray,
    actor: GaussianActor,
    bc_policy,
    critics: CriticEnsemble,
    beta: float,
    rng: np.random.Generator,
) -> ProposalDecision:
    """Sample the RL action, score both candidates, pick via the softmax.

    Candidates are scored with the mean over all online critics; the BC
    candidate is the BC policy's deterministic mean action.
    """
    a_rl = actor.sample(obs, rng).action
    a_bc = bc_policy.action(obs)
    q_rl = float(q_values(critics, obs, a_rl).mean())
    q_bc = float(q_values(critics, obs, a_bc).mean())
    source, p_bc = boltzmann_choice(q_rl, q_bc, beta, rng)
    return ProposalDecision(
        action=a_bc if source == "bc" else a_rl,
        source=source,
        q_rl=q_rl,
        q_bc=q_bc,
        p_bc=p_bc,
        beta=beta,
    )
