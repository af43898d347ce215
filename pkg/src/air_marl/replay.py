"""Episodic FIFO replay buffer with padded batch sampling.

Episodes are stored raw and padded only at sample time, so the buffer never
commits to a maximum length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BufferNotReady, ContractViolation


@dataclass
class Episode:
    obs: np.ndarray  # (L+1, n_agents, obs_dim); last row is the final observation
    state: np.ndarray  # (L+1, state_dim)
    actions: np.ndarray  # (L, n_agents) int
    reward: np.ndarray  # (L,)
    avail: np.ndarray  # (L+1, n_agents, n_actions) bool
    terminal: np.ndarray  # (L,) float, 1.0 exactly at the final step

    def __post_init__(self):
        L = self.actions.shape[0]
        if L < 1:
            raise ContractViolation("episode must contain at least one step")
        if (
            self.obs.shape[0] != L + 1
            or self.state.shape[0] != L + 1
            or self.reward.shape != (L,)
            or self.avail.shape[0] != L + 1
            or self.terminal.shape != (L,)
        ):
            raise ContractViolation("episode arrays are length-inconsistent")
        if self.terminal[-1] != 1.0 or np.any(self.terminal[:-1] != 0.0):
            raise ContractViolation("episode must terminate exactly at its last step")

    @property
    def length(self):
        return self.actions.shape[0]

    @property
    def return_(self):
        return float(self.reward.sum())


@dataclass
class EpisodeBatch:
    """Padded stack of episodes plus a step-validity mask."""

    obs: np.ndarray  # (B, T+1, n, obs_dim)
    state: np.ndarray  # (B, T+1, state_dim)
    actions: np.ndarray  # (B, T, n)
    reward: np.ndarray  # (B, T)
    avail: np.ndarray  # (B, T+1, n, n_actions)
    terminal: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T), 1.0 on real steps, 0.0 on padding

    def prev_action_onehot(self, t):
        """(B, n, n_actions) one-hot of the action taken at t-1; zeros at t=0."""
        B, _, n, _ = self.obs.shape
        U = self.avail.shape[-1]
        out = np.zeros((B, n, U))
        if t > 0:
            rows = np.repeat(np.arange(B), n)
            cols = np.tile(np.arange(n), B)
            out[rows, cols, self.actions[:, t - 1].reshape(-1)] = 1.0
            out *= self.mask[:, t - 1][:, None, None]
        return out


def batch_episodes(episodes) -> EpisodeBatch:
    B = len(episodes)
    T = max(ep.length for ep in episodes)
    if all(ep.length == T for ep in episodes):
        # no padding needed: stack directly
        return EpisodeBatch(
            obs=np.stack([ep.obs for ep in episodes]),
            state=np.stack([ep.state for ep in episodes]),
            actions=np.stack([ep.actions for ep in episodes]),
            reward=np.stack([ep.reward for ep in episodes]),
            avail=np.stack([ep.avail for ep in episodes]),
            terminal=np.stack([ep.terminal for ep in episodes]),
            mask=np.ones((B, T)),
        )
    n = episodes[0].obs.shape[1]
    obs_dim = episodes[0].obs.shape[2]
    state_dim = episodes[0].state.shape[1]
    U = episodes[0].avail.shape[2]
    batch = EpisodeBatch(
        obs=np.zeros((B, T + 1, n, obs_dim)),
        state=np.zeros((B, T + 1, state_dim)),
        actions=np.zeros((B, T, n), dtype=np.intp),
        reward=np.zeros((B, T)),
        avail=np.ones((B, T + 1, n, U), dtype=bool),
        terminal=np.zeros((B, T)),
        mask=np.zeros((B, T)),
    )
    for i, ep in enumerate(episodes):
        L = ep.length
        batch.obs[i, : L + 1] = ep.obs
        batch.state[i, : L + 1] = ep.state
        batch.actions[i, :L] = ep.actions
        batch.reward[i, :L] = ep.reward
        batch.avail[i, : L + 1] = ep.avail
        batch.terminal[i, :L] = ep.terminal
        batch.mask[i, :L] = 1.0
    return batch


class ReplayBuffer:
    """FIFO ring of episodes; eviction is strictly oldest-first."""

    def __init__(self, capacity=5000):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        # a plain list so sampling gets O(1) random access; FIFO eviction pops
        # the front (a cheap pointer memmove at these capacities)
        self._episodes = []

    def __len__(self):
        return len(self._episodes)

    def push_episode(self, episode: Episode):
        if not isinstance(episode, Episode):
            raise ContractViolation("push_episode expects an Episode")
        self._episodes.append(episode)
        if len(self._episodes) > self.capacity:
            del self._episodes[0]

    def can_sample(self, batch_size):
        return len(self._episodes) >= batch_size

    def sample_batch(self, batch_size, rng) -> EpisodeBatch:
        """Uniform sample without replacement, padded to the longest episode."""
        if batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if not self.can_sample(batch_size):
            raise BufferNotReady(
                f"buffer holds {len(self._episodes)} episodes, need {batch_size}"
            )
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return batch_episodes([self._episodes[i] for i in idx])

    def episode_at(self, i) -> Episode:
        return self._episodes[i]
