"""Centralized identity discriminator trained adversarially by cross-entropy.

The network sees observation histories with the agent-id suffix stripped
(otherwise identification is trivial and the diversity signal degenerates)
plus the previous action, and emits one identity log-distribution per
candidate action, so shaped action selection evaluates every action in a
single forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolation


@dataclass(frozen=True)
class ClassifierSpec:
    obs_dim: int  # WITHOUT the one-hot agent id suffix
    n_actions: int
    n_agents: int
    hidden_dim: int = 64

    @property
    def input_dim(self):
        return self.obs_dim + self.n_actions

    @cached_property
    def gru(self):
        return nn.GruCellSpec(self.hidden_dim, self.hidden_dim)

    @cached_property
    def fc_spec(self):
        return nn.MlpSpec((self.input_dim, self.hidden_dim), ("relu",))

    @cached_property
    def head_spec(self):
        return nn.MlpSpec(
            (self.hidden_dim, self.n_actions * self.n_agents), ("identity",)
        )


def init_classifier(rng, spec: ClassifierSpec, params: dict, prefix="clf"):
    nn.init_mlp(
        rng,
        nn.MlpSpec((spec.input_dim, spec.hidden_dim), ("relu",)),
        f"{prefix}.fc_in",
        params,
    )
    nn.init_gru(rng, spec.gru, f"{prefix}.gru", params)
    nn.init_mlp(
        rng,
        nn.MlpSpec((spec.hidden_dim, spec.n_actions * spec.n_agents), ("identity",)),
        f"{prefix}.head",
        params,
    )


def initial_hidden(spec: ClassifierSpec, n_rows):
    return ad.tensor(np.zeros((n_rows, spec.hidden_dim)))


def classify(spec: ClassifierSpec, params: dict, obs_no_id, prev_action_onehot, hidden, prefix="clf"):
    """Per-action identity log-probabilities.

    Returns (log_q, hidden') where log_q has shape (rows, n_actions, n_agents)
    and every (row, action) slice is a normalized log-distribution over agent
    identities (log-softmax, never log of softmax).
    """
    obs_no_id = np.asarray(obs_no_id, dtype=np.float64)
    if obs_no_id.shape[-1] != spec.obs_dim:
        raise ContractViolation(
            f"classify: obs width {obs_no_id.shape[-1]} != spec obs_dim {spec.obs_dim} "
            "(agent-id suffix must be stripped)"
        )
    rows = obs_no_id.shape[0]
    x = ad.tensor(np.concatenate([obs_no_id, prev_action_onehot], axis=-1))
    x = nn.mlp_forward(spec.fc_spec, params, f"{prefix}.fc_in", x)
    h = nn.gru_step(spec.gru, params, f"{prefix}.gru", x, hidden)
    logits = nn.mlp_forward(spec.head_spec, params, f"{prefix}.head", h)
    log_q = ad.log_softmax(ad.reshape(logits, (rows, spec.n_actions, spec.n_agents)))
    return log_q, h


def classify_np(spec: ClassifierSpec, params: dict, obs_no_id, prev_action_onehot, hidden, prefix="clf"):
    """Gradient-free twin of classify for action selection during rollouts."""
    obs_no_id = np.asarray(obs_no_id, dtype=np.float64)
    if obs_no_id.shape[-1] != spec.obs_dim:
        raise ContractViolation(
            f"classify: obs width {obs_no_id.shape[-1]} != spec obs_dim {spec.obs_dim} "
            "(agent-id suffix must be stripped)"
        )
    rows = obs_no_id.shape[0]
    x = np.concatenate([obs_no_id, prev_action_onehot], axis=-1)
    x = nn.mlp_forward_np(spec.fc_spec, params, f"{prefix}.fc_in", x)
    h = nn.gru_step_np(spec.gru, params, f"{prefix}.gru", x, hidden)
    logits = nn.mlp_forward_np(spec.head_spec, params, f"{prefix}.head", h)
    logits = logits.reshape(rows, spec.n_actions, spec.n_agents)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return log_q, h


def strip_agent_id(obs, n_agents):
    return obs[..., :-n_agents]


def batch_log_q(spec: ClassifierSpec, params: dict, batch, n_steps):
    """Unrolled log q(z | trajectory, action) tables for a padded episode batch.

    Returns a list over timesteps of Tensors shaped (B*n, n_actions, n_agents).
    """
    B, _, n, _ = batch.obs.shape
    hidden = initial_hidden(spec, B * n)
    out = []
    for t in range(n_steps):
        obs_t = strip_agent_id(batch.obs[:, t], n).reshape(B * n, -1)
        prev_t = batch.prev_action_onehot(t).reshape(B * n, -1)
        log_q, hidden = classify(spec, params, obs_t, prev_t, hidden)
        out.append(log_q)
    return out


def classifier_train_step(spec: ClassifierSpec, params, adam_state, batch, lr=0.0005):
    """One Adam step on the mean cross-entropy over valid (timestep, agent) pairs.

    Returns (mean_nll, accuracy, chosen_log_q) where chosen_log_q holds the
    PRE-update log q(z_k | tau_t, u_t) values for every valid pair; the
    temperature module consumes exactly these.
    """
    B, T1, n, _ = batch.obs.shape
    T = T1 - 1
    if batch.mask.sum() == 0:
        raise ContractViolation("classifier_train_step on an all-masked batch")
    labels = np.tile(np.arange(n), B)  # true agent id per row of a timestep slice
    mask_total = batch.mask.sum() * n

    chosen_values = []
    loss_sum = None
    correct = 0.0
    with ad.Tape() as tape:
        tables = batch_log_q(spec, params, batch, T)
        for t in range(T):
            log_q = tables[t]  # (B*n, U, n)
            acts = batch.actions[:, t].reshape(B * n)
            chosen_rows = log_q.data[np.arange(B * n), acts]  # (B*n, n) pre-update
            chosen = ad.take_along(
                ad.reshape(log_q, (B * n, spec.n_actions * n)), acts * n + labels
            )
            step_mask = np.repeat(batch.mask[:, t], n)
            nll_t = ad.sum_(ad.mul(ad.neg(chosen), ad.tensor(step_mask)))
            loss_sum = nll_t if loss_sum is None else ad.add(loss_sum, nll_t)
            chosen_values.append(chosen.data[step_mask > 0])
            correct += ((chosen_rows.argmax(axis=-1) == labels) * step_mask).sum()
        loss = ad.scale(loss_sum, 1.0 / mask_total)
        ad.zero_grads(params)
        tape.backward(loss)
    ad.adam_step(params, adam_state, lr)
    chosen_log_q = np.concatenate(chosen_values) if chosen_values else np.zeros(0)
    return float(loss.data), float(correct / mask_total), chosen_log_q


def evaluate_classifier(spec: ClassifierSpec, params, batch):
    """Held-out diagnostics without touching parameters: (mean_nll, accuracy)."""
    B, T1, n, _ = batch.obs.shape
    T = T1 - 1
    labels = np.tile(np.arange(n), B)
    mask_total = batch.mask.sum() * n
    tables = batch_log_q(spec, params, batch, T)
    nll = 0.0
    correct = 0.0
    for t in range(T):
        log_q = tables[t].data
        acts = batch.actions[:, t].reshape(B * n)
        chosen_rows = log_q[np.arange(B * n), acts]  # (B*n, n)
        step_mask = np.repeat(batch.mask[:, t], n)
        nll += (-chosen_rows[np.arange(B * n), labels] * step_mask).sum()
        correct += ((chosen_rows.argmax(axis=-1) == labels) * step_mask).sum()
    return float(nll / mask_total), float(correct / mask_total)
