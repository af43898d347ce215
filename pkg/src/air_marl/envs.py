"""Dec-POMDP environment contract and the built-in families.

Three families ship with the package:
  * one-shot cooperative matrix games (climb and penalty fixtures),
  * a landmark-spread gridworld that rewards behavioral specialization,
  * fully enumerable tabular Dec-POMDPs used by the oracle suite.

Observation vectors always end with the agent's one-hot id. The identity
classifier strips that suffix so identification is nontrivial only through
behavior.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, ContractViolation

DEFAULT_ENUM_BUDGET = 10**7


@dataclass
class StepResult:
    obs: np.ndarray  # (n_agents, obs_dim)
    state: np.ndarray  # (state_dim,)
    reward: float
    terminated: bool
    masks: np.ndarray  # (n_agents, n_actions) bool, at least one True per row

    def __post_init__(self):
        if not np.all(np.isfinite(self.obs)):
            raise ContractViolation("non-finite observation")
        if not np.all(self.masks.any(axis=-1)):
            raise ContractViolation("an agent has no available action")


class Env:
    """Shared contract: reset(seed) then step(joint_action) until terminated."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    horizon: int

    def reset(self, seed=None) -> StepResult:
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError

    def _check_actions(self, joint_action, masks):
        joint_action = np.asarray(joint_action, dtype=np.intp)
        if joint_action.shape != (self.n_agents,):
            raise ContractViolation(
                f"joint action shape {joint_action.shape} != ({self.n_agents},)"
            )
        for k, a in enumerate(joint_action):
            if a < 0 or a >= self.n_actions or not masks[k, a]:
                raise ContractViolation(f"agent {k} chose unavailable action {a}")
        return joint_action


# ---------------------------------------------------------------------------
# one-shot cooperative matrix games

CLIMB_PAYOFF = np.array(
    [[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]]
)

PENALTY_PAYOFF = np.array(
    [[10.0, 0.0, -100.0], [0.0, 2.0, 0.0], [-100.0, 0.0, 10.0]]
)


@dataclass(frozen=True)
class MatrixGameSpec:
    payoff: np.ndarray  # one axis per agent

    def __post_init__(self):
        if not np.all(np.isfinite(self.payoff)):
            raise ContractViolation("payoff table must be finite")


class MatrixGameEnv(Env):
    """Stateless one-shot game; observation is a constant plus the agent id."""

    def __init__(self, spec: MatrixGameSpec):
        self.spec = spec
        self.n_agents = spec.payoff.ndim
        self.n_actions = spec.payoff.shape[0]
        self.obs_dim = 1 + self.n_agents
        self.state_dim = 1
        self.horizon = 1
        self.optimal_return = float(spec.payoff.max())
        self._done = True
        obs = np.zeros((self.n_agents, self.obs_dim))
        obs[:, 0] = 1.0
        obs[:, 1:] = np.eye(self.n_agents)
        obs.flags.writeable = False
        self._obs_const = obs
        masks = np.ones((self.n_agents, self.n_actions), dtype=bool)
        masks.flags.writeable = False
        self._masks_const = masks
        state = np.ones(1)
        state.flags.writeable = False
        self._state_const = state

    def _obs(self):
        return self._obs_const

    def _masks(self):
        return self._masks_const

    def reset(self, seed=None):
        self._done = False
        return StepResult(self._obs(), self._state_const, 0.0, False, self._masks())

    def step(self, joint_action):
        if self._done:
            raise ContractViolation("step after episode end")
        joint_action = self._check_actions(joint_action, self._masks())
        reward = float(self.spec.payoff[tuple(joint_action)])
        self._done = True
        return StepResult(self._obs(), self._state_const, reward, True, self._masks())


def make_climb_env():
    return MatrixGameEnv(MatrixGameSpec(CLIMB_PAYOFF))


def make_penalty_env(penalty=-100.0):
    payoff = PENALTY_PAYOFF.copy()
    payoff[0, 2] = payoff[2, 0] = penalty
    return MatrixGameEnv(MatrixGameSpec(payoff))


# ---------------------------------------------------------------------------
# landmark-spread gridworld

# actions: up, down, left, right, stay
_MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]])


@dataclass(frozen=True)
class SpreadGridSpec:
    width: int = 5
    height: int = 5
    n_agents: int = 3
    horizon: int = 25

    def __post_init__(self):
        if self.width < 2 or self.height < 2 or self.n_agents < 1:
            raise ContractViolation("bad SpreadGridSpec dimensions")
        if self.n_agents > self.width * self.height:
            raise ContractViolation("more agents than cells")


class SpreadGridEnv(Env):
    """Agents must spread out so each landmark ends up with exactly one agent.

    Terminal reward counts singly-occupied landmarks; per-step shaping is the
    negated sum over landmarks of the nearest-agent Manhattan distance,
    normalized so each step's shaping lies in [-1, 0]. Episode returns are
    therefore within [-horizon, n_agents].
    """

    def __init__(self, spec: SpreadGridSpec):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.n_landmarks = spec.n_agents
        self.n_actions = 5
        # own pos + landmark offsets + other-agent offsets + one-hot id
        self.obs_dim = 2 + 2 * self.n_landmarks + 2 * (self.n_agents - 1) + self.n_agents
        self.state_dim = 2 * self.n_agents + 2 * self.n_landmarks
        self.horizon = spec.horizon
        self._rng = np.random.default_rng(0)
        self._shaping_norm = self.n_landmarks * (spec.width + spec.height - 2)
        self._done = True

    def _masks(self):
        return np.ones((self.n_agents, self.n_actions), dtype=bool)

    def _scale(self):
        return np.array([self.spec.width - 1, self.spec.height - 1], dtype=np.float64)

    def _obs(self):
        scale = self._scale()
        obs = np.zeros((self.n_agents, self.obs_dim))
        for k in range(self.n_agents):
            parts = [self.agent_pos[k] / scale]
            parts.append(((self.landmarks - self.agent_pos[k]) / scale).ravel())
            others = np.delete(self.agent_pos, k, axis=0)
            parts.append(((others - self.agent_pos[k]) / scale).ravel())
            onehot = np.zeros(self.n_agents)
            onehot[k] = 1.0
            parts.append(onehot)
            obs[k] = np.concatenate(parts)
        return obs

    def _state(self):
        scale = self._scale()
        return np.concatenate(
            [(self.agent_pos / scale).ravel(), (self.landmarks / scale).ravel()]
        )

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cells = self._rng.permutation(self.spec.width * self.spec.height)
        lm = cells[: self.n_landmarks]
        self.landmarks = np.stack(
            [lm % self.spec.width, lm // self.spec.width], axis=1
        ).astype(np.int64)
        self.agent_pos = np.stack(
            [
                self._rng.integers(0, self.spec.width, size=self.n_agents),
                self._rng.integers(0, self.spec.height, size=self.n_agents),
            ],
            axis=1,
        ).astype(np.int64)
        self._t = 0
        self._done = False
        return StepResult(self._obs(), self._state(), 0.0, False, self._masks())

    def _shaping(self):
        dists = np.abs(self.landmarks[:, None, :] - self.agent_pos[None, :, :]).sum(-1)
        return -float(dists.min(axis=1).sum()) / self._shaping_norm

    def step(self, joint_action):
        if self._done:
            raise ContractViolation("step after episode end")
        joint_action = self._check_actions(joint_action, self._masks())
        self.agent_pos = self.agent_pos + _MOVES[joint_action]
        self.agent_pos[:, 0] = np.clip(self.agent_pos[:, 0], 0, self.spec.width - 1)
        self.agent_pos[:, 1] = np.clip(self.agent_pos[:, 1], 0, self.spec.height - 1)
        self._t += 1
        terminated = self._t >= self.horizon
        reward = self._shaping()
        if terminated:
            occupancy = (
                (self.landmarks[:, None, :] == self.agent_pos[None, :, :])
                .all(-1)
                .sum(axis=1)
            )
            reward += float((occupancy == 1).sum())
            self._done = True
        return StepResult(self._obs(), self._state(), reward, terminated, self._masks())


# ---------------------------------------------------------------------------
# enumerable tabular Dec-POMDPs


@dataclass
class TabularDecPOMDP:
    """Fully enumerable spec: joint actions are flat indices into U^n."""

    n_agents: int
    n_states: int
    n_actions: int
    n_obs: int
    transition: np.ndarray  # (S, U^n, S)
    observation: np.ndarray  # (n, S, O)
    reward: np.ndarray  # (S, U^n)
    initial: np.ndarray  # (S,)
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        n_joint = self.n_actions**self.n_agents
        if self.transition.shape != (self.n_states, n_joint, self.n_states):
            raise ContractViolation(f"bad transition shape {self.transition.shape}")
        if self.observation.shape != (self.n_agents, self.n_states, self.n_obs):
            raise ContractViolation(f"bad observation shape {self.observation.shape}")
        if self.reward.shape != (self.n_states, n_joint):
            raise ContractViolation(f"bad reward shape {self.reward.shape}")
        if self.initial.shape != (self.n_states,):
            raise ContractViolation(f"bad initial shape {self.initial.shape}")
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if not np.all(np.isfinite(self.reward)):
            raise ContractViolation("rewards must be finite")
        if np.any(np.abs(self.transition.sum(-1) - 1.0) > 1e-12):
            raise ContractViolation("transition rows must sum to 1 +- 1e-12")
        if np.any(np.abs(self.observation.sum(-1) - 1.0) > 1e-12):
            raise ContractViolation("observation rows must sum to 1 +- 1e-12")
        if abs(self.initial.sum() - 1.0) > 1e-12:
            raise ContractViolation("initial distribution must sum to 1 +- 1e-12")

    def joint_index(self, joint_action):
        idx = 0
        for a in joint_action:
            idx = idx * self.n_actions + int(a)
        return idx

    def has_shared_observations(self):
        return all(
            np.array_equal(self.observation[k], self.observation[0])
            for k in range(self.n_agents)
        )


class TabularEnv(Env):
    """Runs a TabularDecPOMDP under the Env contract with one-hot observations."""

    def __init__(self, spec: TabularDecPOMDP):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.n_actions = spec.n_actions
        self.obs_dim = spec.n_obs + spec.n_agents
        self.state_dim = spec.n_states
        self.horizon = spec.horizon
        self._rng = np.random.default_rng(0)
        self._done = True

    def _masks(self):
        return np.ones((self.n_agents, self.n_actions), dtype=bool)

    def _emit(self):
        obs = np.zeros((self.n_agents, self.obs_dim))
        for k in range(self.n_agents):
            o = self._rng.choice(self.spec.n_obs, p=self.spec.observation[k, self._s])
            obs[k, o] = 1.0
            obs[k, self.spec.n_obs + k] = 1.0
        state = np.zeros(self.spec.n_states)
        state[self._s] = 1.0
        return obs, state

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._s = self._rng.choice(self.spec.n_states, p=self.spec.initial)
        self._t = 0
        self._done = False
        obs, state = self._emit()
        return StepResult(obs, state, 0.0, False, self._masks())

    def step(self, joint_action):
        if self._done:
            raise ContractViolation("step after episode end")
        joint_action = self._check_actions(joint_action, self._masks())
        j = self.spec.joint_index(joint_action)
        reward = float(self.spec.reward[self._s, j])
        self._s = self._rng.choice(self.spec.n_states, p=self.spec.transition[self._s, j])
        self._t += 1
        terminated = self._t >= self.horizon
        if terminated:
            self._done = True
        obs, state = self._emit()
        return StepResult(obs, state, reward, terminated, self._masks())


def state_marginals(spec: TabularDecPOMDP, policies: np.ndarray) -> np.ndarray:
    """Per-step state marginals under the full joint policy, by forward filtering.

    policies has shape (n_agents, n_obs, n_actions) with rows summing to 1.
    Returns an array of shape (horizon, n_states).
    """
    policies = np.asarray(policies, dtype=np.float64)
    if policies.shape != (spec.n_agents, spec.n_obs, spec.n_actions):
        raise ContractViolation(f"bad policy shape {policies.shape}")
    # per-agent action probabilities conditioned on the state
    act_given_state = np.einsum("kso,koa->ksa", spec.observation, policies)
    n_joint = spec.n_actions**spec.n_agents
    joint_given_state = np.ones((spec.n_states, n_joint))
    for j, joint in enumerate(
        itertools.product(range(spec.n_actions), repeat=spec.n_agents)
    ):
        for k, a in enumerate(joint):
            joint_given_state[:, j] *= act_given_state[k, :, a]
    marginals = np.zeros((spec.horizon, spec.n_states))
    m = spec.initial.copy()
    for t in range(spec.horizon):
        marginals[t] = m
        m = np.einsum("s,sj,sjr->r", m, joint_given_state, spec.transition)
    return marginals


def enumerate_support(
    spec: TabularDecPOMDP, policies: np.ndarray, budget: int = DEFAULT_ENUM_BUDGET
):
    """Every per-agent (observation, action) sequence with its probability mass
    under the per-step-marginal factorization.

    Returns a list of n_agents dicts mapping ((o_0, u_0), ..., (o_{T-1}, u_{T-1}))
    to probability.
    """
    n_records = spec.n_agents * (spec.n_obs * spec.n_actions) ** spec.horizon
    if n_records > budget:
        raise BudgetExceeded(
            f"enumeration would produce {n_records} records (budget {budget})"
        )
    policies = np.asarray(policies, dtype=np.float64)
    marginals = state_marginals(spec, policies)
    # per-step observation marginals per agent: m_t(o) = sum_s P(s_t) O(o|s,k)
    obs_marginals = np.einsum("ts,kso->kto", marginals, spec.observation)
    dists = []
    steps = list(
        itertools.product(range(spec.n_obs), range(spec.n_actions))
    )
    for k in range(spec.n_agents):
        dist = {}
        for seq in itertools.product(steps, repeat=spec.horizon):
            p = 1.0
            for t, (o, u) in enumerate(seq):
                p *= policies[k, o, u] * obs_marginals[k, t, o]
            dist[seq] = p
        dists.append(dist)
    return dists


# ---------------------------------------------------------------------------
# tabular spec file format (JSON with a checksum over the tables)


def _tables_checksum(payload: dict) -> str:
    canon = json.dumps(
        {k: payload[k] for k in ("transition", "observation", "reward", "initial")},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_tabular_spec(spec: TabularDecPOMDP, path):
    payload = {
        "format": "air-tabular-decpomdp-v1",
        "n_agents": spec.n_agents,
        "n_states": spec.n_states,
        "n_actions": spec.n_actions,
        "n_obs": spec.n_obs,
        "horizon": spec.horizon,
        "gamma": spec.gamma,
        "transition": spec.transition.tolist(),
        "observation": spec.observation.tolist(),
        "reward": spec.reward.tolist(),
        "initial": spec.initial.tolist(),
    }
    payload["checksum"] = _tables_checksum(payload)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_tabular_spec(path) -> TabularDecPOMDP:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractViolation(f"cannot parse tabular spec file: {exc}") from exc
    if payload.get("format") != "air-tabular-decpomdp-v1":
        raise ContractViolation("unrecognized tabular spec format")
    if payload.get("checksum") != _tables_checksum(payload):
        raise ContractViolation("tabular spec checksum mismatch")
    return TabularDecPOMDP(
        n_agents=int(payload["n_agents"]),
        n_states=int(payload["n_states"]),
        n_actions=int(payload["n_actions"]),
        n_obs=int(payload["n_obs"]),
        transition=np.array(payload["transition"], dtype=np.float64),
        observation=np.array(payload["observation"], dtype=np.float64),
        reward=np.array(payload["reward"], dtype=np.float64),
        initial=np.array(payload["initial"], dtype=np.float64),
        horizon=int(payload["horizon"]),
        gamma=float(payload["gamma"]),
    )


def make_env(name: str) -> Env:
    """Resolve an environment key: climb, penalty, spread, or tabular:<path>."""
    if name == "climb":
        return make_climb_env()
    if name == "penalty":
        return make_penalty_env()
    if name == "spread":
        return SpreadGridEnv(SpreadGridSpec())
    if name.startswith("tabular:"):
        return TabularEnv(load_tabular_spec(name.split(":", 1)[1]))
    raise ContractViolation(
        f"unknown env '{name}' (expected climb, penalty, spread, or tabular:<path>)"
    )
