"""Per-agent recurrent Q-networks and the VDN/QMIX mixers with the TD objective.

Agents share parameters; the one-hot agent id at the end of each observation
lets a single network behave differently per agent. Exploration shaping never
enters the TD loss: both online and target values use raw Q.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolation

NEG_LARGE = -1e30  # finite stand-in for -inf inside value computations


@dataclass(frozen=True)
class AgentNetSpec:
    obs_dim: int  # includes the one-hot agent id suffix
    n_actions: int
    hidden_dim: int = 64

    @property
    def input_dim(self):
        return self.obs_dim + self.n_actions  # obs + previous-action one-hot

    @cached_property
    def gru(self):
        return nn.GruCellSpec(self.hidden_dim, self.hidden_dim)

    @cached_property
    def fc_spec(self):
        return nn.MlpSpec((self.input_dim, self.hidden_dim), ("relu",))

    @cached_property
    def head_spec(self):
        return nn.MlpSpec((self.hidden_dim, self.n_actions), ("identity",))


def init_agent_net(rng, spec: AgentNetSpec, params: dict, prefix="agent"):
    nn.init_mlp(
        rng,
        nn.MlpSpec((spec.input_dim, spec.hidden_dim), ("relu",)),
        f"{prefix}.fc_in",
        params,
    )
    nn.init_gru(rng, spec.gru, f"{prefix}.gru", params)
    nn.init_mlp(
        rng,
        nn.MlpSpec((spec.hidden_dim, spec.n_actions), ("identity",)),
        f"{prefix}.head",
        params,
    )


def initial_hidden(spec, n_rows):
    return ad.tensor(np.zeros((n_rows, spec.hidden_dim)))


def agent_q(spec: AgentNetSpec, params: dict, obs, prev_action_onehot, hidden, prefix="agent"):
    """One recurrent step; rows may mix agents and batch entries freely."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != spec.obs_dim:
        raise ContractViolation(
            f"agent_q: obs width {obs.shape[-1]} != spec obs_dim {spec.obs_dim}"
        )
    x = ad.tensor(np.concatenate([obs, prev_action_onehot], axis=-1))
    x = nn.mlp_forward(spec.fc_spec, params, f"{prefix}.fc_in", x)
    h = nn.gru_step(spec.gru, params, f"{prefix}.gru", x, hidden)
    q = nn.mlp_forward(spec.head_spec, params, f"{prefix}.head", h)
    return q, h


def agent_q_np(spec: AgentNetSpec, params: dict, obs, prev_action_onehot, hidden, prefix="agent"):
    """Gradient-free twin of agent_q for rollouts and target unrolls."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != spec.obs_dim:
        raise ContractViolation(
            f"agent_q: obs width {obs.shape[-1]} != spec obs_dim {spec.obs_dim}"
        )
    x = np.concatenate([obs, prev_action_onehot], axis=-1)
    x = nn.mlp_forward_np(spec.fc_spec, params, f"{prefix}.fc_in", x)
    h = nn.gru_step_np(spec.gru, params, f"{prefix}.gru", x, hidden)
    q = nn.mlp_forward_np(spec.head_spec, params, f"{prefix}.head", h)
    return q, h


# ---------------------------------------------------------------------------
# mixers


def vdn_mix(q_chosen):
    """Additive mixing: sum of per-agent chosen Q-values along the last axis."""
    if isinstance(q_chosen, ad.Tensor):
        return ad.sum_(q_chosen, axis=-1)
    return np.asarray(q_chosen, dtype=np.float64).sum(axis=-1)


@dataclass(frozen=True)
class QmixSpec:
    n_agents: int
    state_dim: int
    mix_dim: int = 32
    hyper_hidden: int = 64

    @cached_property
    def mlp_specs(self):
        s, h, m, n = self.state_dim, self.hyper_hidden, self.mix_dim, self.n_agents
        return {
            "hw1": nn.MlpSpec((s, h, n * m), ("relu", "identity")),
            "hb1": nn.MlpSpec((s, m), ("identity",)),
            "hw2": nn.MlpSpec((s, h, m), ("relu", "identity")),
            "v": nn.MlpSpec((s, m, 1), ("relu", "identity")),
        }


def init_qmix(rng, spec: QmixSpec, params: dict, prefix="mix"):
    for name, mspec in spec.mlp_specs.items():
        nn.init_mlp(rng, mspec, f"{prefix}.{name}", params)


def qmix_mix(spec: QmixSpec, params: dict, q_chosen, state, prefix="mix"):
    """State-conditioned monotone mixing: Q_tot is non-decreasing in every Q_a.

    Weights come from hypernetworks through an absolute value; the hidden
    layer uses ELU.
    """
    if not isinstance(q_chosen, ad.Tensor):
        q_chosen = ad.tensor(np.asarray(q_chosen, dtype=np.float64))
    if not isinstance(state, ad.Tensor):
        state = ad.tensor(np.asarray(state, dtype=np.float64))
    batch = q_chosen.data.shape[0]
    if q_chosen.data.shape != (batch, spec.n_agents):
        raise ContractViolation(
            f"qmix_mix: q shape {q_chosen.data.shape} != ({batch}, {spec.n_agents})"
        )
    specs = spec.mlp_specs
    w1 = ad.abs_(nn.mlp_forward(specs["hw1"], params, f"{prefix}.hw1", state))
    w1 = ad.reshape(w1, (batch, spec.n_agents, spec.mix_dim))
    b1 = ad.reshape(
        nn.mlp_forward(specs["hb1"], params, f"{prefix}.hb1", state),
        (batch, 1, spec.mix_dim),
    )
    hidden = ad.elu(ad.add(ad.bmm(ad.reshape(q_chosen, (batch, 1, spec.n_agents)), w1), b1))
    w2 = ad.reshape(
        ad.abs_(nn.mlp_forward(specs["hw2"], params, f"{prefix}.hw2", state)),
        (batch, spec.mix_dim, 1),
    )
    v = ad.reshape(nn.mlp_forward(specs["v"], params, f"{prefix}.v", state), (batch, 1, 1))
    out = ad.add(ad.bmm(hidden, w2), v)
    return ad.reshape(out, (batch,))


def qmix_mix_np(spec: QmixSpec, params: dict, q_chosen, state, prefix="mix"):
    """Gradient-free twin of qmix_mix for target-network mixing."""
    q_chosen = np.asarray(q_chosen, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    batch = q_chosen.shape[0]
    specs = spec.mlp_specs
    w1 = np.abs(nn.mlp_forward_np(specs["hw1"], params, f"{prefix}.hw1", state))
    w1 = w1.reshape(batch, spec.n_agents, spec.mix_dim)
    b1 = nn.mlp_forward_np(specs["hb1"], params, f"{prefix}.hb1", state)
    pre = (q_chosen[:, None, :] @ w1 + b1[:, None, :])[:, 0]
    hidden = np.where(pre > 0.0, pre, np.expm1(np.minimum(pre, 0.0)))
    w2 = np.abs(nn.mlp_forward_np(specs["hw2"], params, f"{prefix}.hw2", state))
    v = nn.mlp_forward_np(specs["v"], params, f"{prefix}.v", state)
    return (hidden * w2).sum(axis=-1) + v[:, 0]


def mix(mixer_kind, spec, params, q_chosen, state):
    if mixer_kind == "vdn":
        return vdn_mix(q_chosen)
    if mixer_kind == "qmix":
        return qmix_mix(spec, params, q_chosen, state)
    raise ContractViolation(f"unknown mixer '{mixer_kind}'")


def mix_np(mixer_kind, spec, params, q_chosen, state):
    if mixer_kind == "vdn":
        return np.asarray(q_chosen, dtype=np.float64).sum(axis=-1)
    if mixer_kind == "qmix":
        return qmix_mix_np(spec, params, q_chosen, state)
    raise ContractViolation(f"unknown mixer '{mixer_kind}'")


# ---------------------------------------------------------------------------
# TD objective


def unroll_agent_q(spec: AgentNetSpec, params: dict, batch, n_steps):
    """Q-values for every timestep 0..n_steps-1 of a padded episode batch.

    Returns a list of Tensors shaped (batch*n_agents, n_actions).
    """
    B, _, n, _ = batch.obs.shape
    hidden = initial_hidden(spec, B * n)
    qs = []
    for t in range(n_steps):
        obs_t = batch.obs[:, t].reshape(B * n, -1)
        prev_t = batch.prev_action_onehot(t).reshape(B * n, -1)
        q, hidden = agent_q(spec, params, obs_t, prev_t, hidden)
        qs.append(q)
    return qs


def unroll_agent_q_np(spec: AgentNetSpec, params: dict, batch, n_steps):
    """Gradient-free unroll; returns an ndarray shaped (n_steps, B*n, U)."""
    B, _, n, _ = batch.obs.shape
    hidden = np.zeros((B * n, spec.hidden_dim))
    qs = np.empty((n_steps, B * n, spec.n_actions))
    for t in range(n_steps):
        obs_t = batch.obs[:, t].reshape(B * n, -1)
        prev_t = batch.prev_action_onehot(t).reshape(B * n, -1)
        qs[t], hidden = agent_q_np(spec, params, obs_t, prev_t, hidden)
    return qs


def greedy_actions(q_values, masks):
    """Per-agent argmax with unavailable actions excluded. q_values is numpy."""
    masked = np.where(masks, q_values, NEG_LARGE)
    return masked.argmax(axis=-1)


def td_loss(batch, agent_spec, mixer_kind, mixer_spec, params, target_params, gamma=0.99):
    """Mean squared TD error over valid steps of a padded episode batch.

    The bootstrap max is the per-agent argmax of individual target Q-values
    (IGM); terminal steps drop the bootstrap term entirely.
    """
    B, T1, n, _ = batch.obs.shape
    T = T1 - 1
    if batch.mask.sum() == 0:
        raise ContractViolation("td_loss on an empty batch")
    online_qs = unroll_agent_q(agent_spec, params, batch, T)

    # targets carry no gradient, so the whole bootstrap side runs untaped;
    # only steps that are valid and non-terminal somewhere need it
    needs_bootstrap = (batch.mask * (1.0 - batch.terminal)).any(axis=0)
    tot_next = np.zeros((T, B))
    if needs_bootstrap.any():
        last_needed = int(np.flatnonzero(needs_bootstrap).max())
        target_qs = unroll_agent_q_np(agent_spec, target_params, batch, last_needed + 2)
        ts = np.flatnonzero(needs_bootstrap)
        tq = target_qs[ts + 1].reshape(len(ts), B, n, -1)
        tmax = np.where(batch.avail[:, ts + 1].transpose(1, 0, 2, 3), tq, NEG_LARGE).max(axis=-1)
        tot_next[ts] = mix_np(
            mixer_kind,
            mixer_spec,
            target_params,
            tmax.reshape(len(ts) * B, n),
            batch.state[:, ts + 1].transpose(1, 0, 2).reshape(len(ts) * B, -1),
        ).reshape(len(ts), B)
    y = batch.reward.T + gamma * (1.0 - batch.terminal.T) * tot_next  # (T, B)

    # one flattened mixing pass over all (t, episode) rows
    q_all = ad.concat(online_qs, axis=0)  # (T*B*n, U), time-major blocks
    chosen = ad.take_along(q_all, batch.actions.transpose(1, 0, 2).reshape(T * B * n))
    tot = mix(
        mixer_kind,
        mixer_spec,
        params,
        ad.reshape(chosen, (T * B, n)),
        batch.state[:, :T].transpose(1, 0, 2).reshape(T * B, -1),
    )
    diff = ad.sub(tot, ad.tensor(y.reshape(T * B)))
    sq = ad.mul(ad.mul(diff, diff), ad.tensor(batch.mask.T.reshape(T * B)))
    return ad.scale(ad.sum_(sq), 1.0 / batch.mask.sum())
