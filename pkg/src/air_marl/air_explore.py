"""Shaped action selection and the adaptive exploration temperature.

The selector prefers actions scored by q_tilde(u) = q(u) - alpha * log q_id(u),
where log q_id(u) is the identity classifier's log-probability that the acting
agent produced (trajectory, u). A positive temperature favors actions the
classifier finds unlikely for this agent (individual exploration); a negative
temperature favors identity-confirming actions (collective exploration,
behavioral diversity). The temperature is a signed dual variable updated by
single-step gradient ascent against a running-mean entropy target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class TemperatureState:
    alpha: float = 0.0
    target_entropy_bar: float = 0.0
    ema_decay: float = 0.99

    def __post_init__(self):
        if not math.isfinite(self.alpha) or not math.isfinite(self.target_entropy_bar):
            raise ContractViolation("TemperatureState fields must be finite")
        if self.target_entropy_bar < 0.0:
            raise ContractViolation("target entropy must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractViolation("ema_decay must lie in (0, 1)")


def initial_temperature(n_agents, alpha=0.0, ema_decay=0.99):
    # H-bar starts at the surprisal of a uniform n-way identity guess.
    return TemperatureState(
        alpha=alpha, target_entropy_bar=float(np.log(n_agents)), ema_decay=ema_decay
    )


@dataclass(frozen=True)
class ShapedQ:
    q_tilde: np.ndarray  # masked actions hold -inf
    mask: np.ndarray


def shaped_q(q, log_q_row, alpha, mask):
    """q_tilde(u) = q(u) - alpha * log q_id(u); masked entries become -inf."""
    q = np.asarray(q, dtype=np.float64)
    log_q_row = np.asarray(log_q_row, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("shaped_q: empty action mask")
    q_tilde = q - alpha * log_q_row
    q_tilde = np.where(mask, q_tilde, -np.inf)
    return ShapedQ(q_tilde=q_tilde, mask=mask)


def select_action(shaped: ShapedQ, eps, rng):
    """Epsilon-greedy over the shaped values; greedy ties break to lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ContractViolation(f"eps={eps} outside [0, 1]")
    if not shaped.mask.any():
        raise ContractViolation("select_action: empty action mask")
    if rng.random() < eps:
        candidates = np.flatnonzero(shaped.mask)
        return int(candidates[rng.integers(len(candidates))])
    return int(np.argmax(shaped.q_tilde))


def update_target_entropy(state: TemperatureState, batch_neg_log_q):
    """EMA step of the running-mean target: H-bar tracks mean -log q_id."""
    stat = float(batch_neg_log_q)
    if not np.isfinite(stat) or stat < 0.0:
        raise ContractViolation(f"negative or non-finite entropy statistic {stat}")
    new_bar = state.ema_decay * state.target_entropy_bar + (1.0 - state.ema_decay) * stat
    return replace(state, target_entropy_bar=new_bar)


def temperature_step(state: TemperatureState, batch_log_q, lr=0.0005):
    """Single ascent step on J(alpha); alpha is unconstrained in sign.

    grad = mean(log q_id) + H-bar: a too-confident classifier (mean surprisal
    below target) pushes alpha up toward individual exploration; a confused
    one pushes it down, possibly across zero into collective mode.
    """
    values = np.asarray(batch_log_q, dtype=np.float64)
    if values.size == 0:
        raise ContractViolation("temperature_step: empty statistic batch")
    if not np.all(np.isfinite(values)) or np.any(values > 0.0):
        raise ContractViolation("temperature_step: log-probabilities must be finite and <= 0")
    grad = float(values.mean()) + state.target_entropy_bar
    return replace(state, alpha=state.alpha + lr * grad)


def epsilon_schedule(step, start=1.0, end=0.05, anneal_steps=50000):
    """Linear anneal: eps(step) = max(end, start - (start-end) * step / anneal).

    Anchored at the floor so the endpoints come out exact in floating point.
    """
    return end + (start - end) * max(0.0, 1.0 - step / anneal_steps)
