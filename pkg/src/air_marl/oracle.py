"""Exact verification engine for the information-theoretic identities on
enumerable Dec-POMDPs.

Trajectory distributions use the per-step-marginal factorization
    rho_k(traj) = prod_t pi_k(u_t|o_t) * sum_s P(s_t) O(o_t|s_t, k),
which differs from the exact joint trajectory law when transitions correlate
states across time; the exact law is computed alongside and both are reported,
because the classifier/policy identity cancels observation factors only under
the factored form. Probabilities stay in linear f64 space: enumerated spaces
are capped small enough that underflow is not a concern.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .envs import (
    DEFAULT_ENUM_BUDGET,
    TabularDecPOMDP,
    enumerate_support,
    state_marginals,
)
from .errors import ContractViolation


@dataclass
class TrajectoryDistribution:
    """Map from ((o_0,u_0),...,(o_{T-1},u_{T-1})) keys to probability mass."""

    mass: dict
    owner: str  # "agent_k" or "system"

    def __post_init__(self):
        values = np.array(list(self.mass.values()))
        if np.any(values < -1e-15):
            raise ContractViolation(f"negative probability mass in {self.owner}")
        if abs(values.sum() - 1.0) > 1e-12:
            raise ContractViolation(
                f"{self.owner} masses sum to {values.sum()}, not 1 +- 1e-12"
            )

    def entropy(self):
        p = np.array(list(self.mass.values()))
        p = p[p > 0.0]
        return float(-(p * np.log(p)).sum())


@dataclass
class InfoReport:
    h_rho: float
    h_rho_given_z: float
    h_z: float
    h_z_given_rho: float
    expected_kl: float
    mutual_information: float


def trajectory_dist(spec: TabularDecPOMDP, policies, budget=DEFAULT_ENUM_BUDGET):
    """Per-agent and system trajectory visit distributions (factored form)."""
    dists = enumerate_support(spec, policies, budget=budget)
    per_agent = [
        TrajectoryDistribution(mass=d, owner=f"agent_{k}") for k, d in enumerate(dists)
    ]
    keys = per_agent[0].mass.keys()
    n = spec.n_agents
    system = TrajectoryDistribution(
        mass={key: sum(d.mass[key] for d in per_agent) / n for key in keys},
        owner="system",
    )
    return per_agent, system


def exact_trajectory_dist(spec: TabularDecPOMDP, policies, budget=DEFAULT_ENUM_BUDGET):
    """Exact joint trajectory law per agent (marginalizing state sequences and
    the other agents' actions), for comparison against the factored form."""
    policies = np.asarray(policies, dtype=np.float64)
    n_records = spec.n_agents * (spec.n_obs * spec.n_actions) ** spec.horizon
    if n_records > budget:
        raise ContractViolation(f"exact enumeration too large: {n_records}")
    act_given_state = np.einsum("kso,koa->ksa", spec.observation, policies)
    joints = list(itertools.product(range(spec.n_actions), repeat=spec.n_agents))
    per_agent = []
    steps = list(itertools.product(range(spec.n_obs), range(spec.n_actions)))
    for k in range(spec.n_agents):
        # kernel[u] (s, s'): transition given agent k plays u, others follow policy
        kernel = np.zeros((spec.n_actions, spec.n_states, spec.n_states))
        for j, joint in enumerate(joints):
            w = np.ones(spec.n_states)
            for i, a in enumerate(joint):
                if i != k:
                    w *= act_given_state[i, :, a]
            kernel[joint[k]] += w[:, None] * spec.transition[:, j, :]
        dist = {}
        for seq in itertools.product(steps, repeat=spec.horizon):
            belief = spec.initial.copy()
            p_pol = 1.0
            for t, (o, u) in enumerate(seq):
                p_pol *= policies[k, o, u]
                weighted = belief * spec.observation[k, :, o]
                if t < spec.horizon - 1:
                    belief = weighted @ kernel[u]
                else:
                    belief = np.array([weighted.sum()])
            dist[seq] = p_pol * float(belief.sum())
        per_agent.append(TrajectoryDistribution(mass=dist, owner=f"agent_{k}_exact"))
    return per_agent


def kl_policy_difference(rho_k: TrajectoryDistribution, rho: TrajectoryDistribution):
    """KL(rho_k || rho) in nats with the 0*log 0 = 0 convention."""
    total = 0.0
    for key, p in rho_k.mass.items():
        if p > 0.0:
            total += p * np.log(p / rho.mass[key])
    return float(total)


def info_report(per_agent, system) -> InfoReport:
    n = len(per_agent)
    h_rho = system.entropy()
    h_rho_given_z = sum(d.entropy() for d in per_agent) / n
    h_z = float(np.log(n))
    # H(z|rho) = sum_tau rho(tau) H(posterior over z)
    h_z_given_rho = 0.0
    for key, p in system.mass.items():
        if p <= 0.0:
            continue
        post = np.array([d.mass[key] / n for d in per_agent]) / p
        post = post[post > 0.0]
        h_z_given_rho += p * float(-(post * np.log(post)).sum())
    expected_kl = sum(kl_policy_difference(d, system) for d in per_agent) / n
    return InfoReport(
        h_rho=h_rho,
        h_rho_given_z=h_rho_given_z,
        h_z=h_z,
        h_z_given_rho=h_z_given_rho,
        expected_kl=expected_kl,
        mutual_information=h_rho - h_rho_given_z,
    )


@dataclass
class CheckResult:
    name: str
    lhs: float
    rhs: float
    error: float
    passed: bool
    detail: str = ""


def check_lemma1(spec, policies) -> CheckResult:
    """Entropy decomposition: H(rho) = E_z[KL(rho_k || rho)] + H(rho|z)."""
    per_agent, system = trajectory_dist(spec, policies)
    report = info_report(per_agent, system)
    lhs = report.h_rho
    rhs = report.expected_kl + report.h_rho_given_z
    err = abs(lhs - rhs)
    return CheckResult("lemma1_kl_decomposition", lhs, rhs, err, err <= 1e-10)


def check_lemma2(spec, policies) -> CheckResult:
    """Mutual-information symmetry: H(rho)-H(rho|z) = H(z)-H(z|rho), H(z)=log n."""
    per_agent, system = trajectory_dist(spec, policies)
    report = info_report(per_agent, system)
    lhs = report.h_rho - report.h_rho_given_z
    rhs = report.h_z - report.h_z_given_rho
    err = abs(lhs - rhs)
    hz_err = abs(report.h_z - np.log(spec.n_agents))
    passed = err <= 1e-10 and hz_err <= 1e-12
    return CheckResult(
        "lemma2_mi_symmetry", lhs, rhs, err, passed, detail=f"hz_err={hz_err:.3e}"
    )


def check_lemma3(spec, policies) -> CheckResult:
    """Bayes posterior over identities equals the policy-ratio formula.

    Exact only when all agents share one observation function, which is
    enforced as a precondition.
    """
    if not spec.has_shared_observations():
        raise ContractViolation(
            "lemma3 requires a shared observation function: the observation "
            "factors cancel in the posterior only when O(o|s,k) is identical "
            "for every agent"
        )
    policies = np.asarray(policies, dtype=np.float64)
    per_agent, system = trajectory_dist(spec, policies)
    n = spec.n_agents
    max_err = 0.0
    for key, p_sys in system.mass.items():
        if p_sys <= 0.0:
            continue
        pol_prods = np.array(
            [np.prod([policies[k, o, u] for (o, u) in key]) for k in range(n)]
        )
        denom = pol_prods.sum()
        for k in range(n):
            enumerated = (per_agent[k].mass[key] / n) / p_sys
            formula = pol_prods[k] / denom if denom > 0.0 else 1.0 / n
            max_err = max(max_err, abs(enumerated - formula))
    return CheckResult(
        "lemma3_posterior_policy_ratio", 0.0, 0.0, max_err, max_err <= 1e-10
    )


def bayes_posterior(per_agent, system):
    """True posterior table: key -> ndarray over agent identities."""
    n = len(per_agent)
    post = {}
    for key, p in system.mass.items():
        if p > 0.0:
            post[key] = np.array([d.mass[key] / n for d in per_agent]) / p
        else:
            post[key] = np.full(n, 1.0 / n)
    return post


def check_elbo(spec, policies, classifier_table) -> CheckResult:
    """Lower-bound margin: (H(z)-H(z|rho)) - (E[log q] + log n) must be >= 0,
    and 0 when the classifier is the true Bayes posterior."""
    per_agent, system = trajectory_dist(spec, policies)
    n = spec.n_agents
    report = info_report(per_agent, system)
    e_log_q = 0.0
    for key in system.mass:
        q = np.asarray(classifier_table[key], dtype=np.float64)
        if abs(q.sum() - 1.0) > 1e-9 or np.any(q < 0.0):
            raise ContractViolation(f"classifier row for {key} is not normalized")
        for k in range(n):
            w = per_agent[k].mass[key] / n
            if w > 0.0:
                if q[k] <= 0.0:
                    e_log_q = -np.inf
                else:
                    e_log_q += w * np.log(q[k])
    mi = report.h_z - report.h_z_given_rho
    bound = e_log_q + np.log(n)
    margin = mi - bound
    return CheckResult("elbo_margin", mi, bound, margin, margin >= -1e-9)


# ---------------------------------------------------------------------------
# fixtures


def fixture_specs():
    """Two small shared-observation specs used across the verification suite."""
    # 2 states, 2 actions, n=2, T=2: deterministic observation of the state,
    # stochastic transitions that depend on the joint action.
    t = np.zeros((2, 4, 2))
    t[0] = [[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]]
    t[1] = [[0.5, 0.5], [0.25, 0.75], [0.8, 0.2], [0.1, 0.9]]
    obs = np.tile(np.eye(2)[None, :, :], (2, 1, 1))
    spec_a = TabularDecPOMDP(
        n_agents=2,
        n_states=2,
        n_actions=2,
        n_obs=2,
        transition=t,
        observation=obs,
        reward=np.array([[1.0, 0.0, 0.0, -1.0], [0.0, 2.0, 0.5, 0.0]]),
        initial=np.array([0.7, 0.3]),
        horizon=2,
    )
    # 1 state, 3 actions, n=3, T=1
    spec_b = TabularDecPOMDP(
        n_agents=3,
        n_states=1,
        n_actions=3,
        n_obs=1,
        transition=np.ones((1, 27, 1)),
        observation=np.ones((3, 1, 1)),
        reward=np.zeros((1, 27)),
        initial=np.array([1.0]),
        horizon=1,
    )
    return [("two_state_chain", spec_a), ("one_shot_three_agents", spec_b)]


def fixture_policies(spec, rng_seeds=range(20)):
    """Identical, disjoint-deterministic, and random softmax policy sets."""
    n, O, U = spec.n_agents, spec.n_obs, spec.n_actions
    sets = []
    identical = np.tile(np.full((O, U), 1.0 / U)[None], (n, 1, 1))
    sets.append(("identical", identical))
    disjoint = np.zeros((n, O, U))
    for k in range(n):
        disjoint[k, :, k % U] = 1.0
    sets.append(("disjoint_deterministic", disjoint))
    for seed in rng_seeds:
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(n, O, U))
        soft = np.exp(logits)
        soft /= soft.sum(axis=-1, keepdims=True)
        sets.append((f"random_{seed}", soft))
    return sets


def run_all_checks(specs=None, n_random_classifiers=100, classifier_seed=12345):
    """The full verification suite; returns a flat list of CheckResults."""
    results = []
    specs = specs if specs is not None else fixture_specs()
    for spec_name, spec in specs:
        for pol_name, policies in fixture_policies(spec):
            tag = f"{spec_name}/{pol_name}"
            for check in (check_lemma1, check_lemma2):
                res = check(spec, policies)
                results.append(CheckResult(f"{res.name}[{tag}]", res.lhs, res.rhs, res.error, res.passed, res.detail))
            if spec.has_shared_observations():
                res = check_lemma3(spec, policies)
                results.append(CheckResult(f"{res.name}[{tag}]", res.lhs, res.rhs, res.error, res.passed, res.detail))
            per_agent, system = trajectory_dist(spec, policies)
            n = spec.n_agents
            # tight bound at the true posterior, loose at uniform
            post = bayes_posterior(per_agent, system)
            res = check_elbo(spec, policies, post)
            tight = abs(res.error) <= 1e-9
            results.append(
                CheckResult(f"elbo_tight[{tag}]", res.lhs, res.rhs, abs(res.error), tight)
            )
            uniform = {key: np.full(n, 1.0 / n) for key in system.mass}
            res = check_elbo(spec, policies, uniform)
            results.append(CheckResult(f"elbo_uniform[{tag}]", res.lhs, res.rhs, res.error, res.passed))
        # random classifier tables on a policy set with nonzero identity MI,
        # so the bound is exercised away from its trivial corner
        rng = np.random.default_rng(classifier_seed)
        policies = fixture_policies(spec)[2][1]
        _, system = trajectory_dist(spec, policies)
        for i in range(n_random_classifiers):
            table = {}
            for key in system.mass:
                row = rng.uniform(0.01, 1.0, size=spec.n_agents)
                table[key] = row / row.sum()
            res = check_elbo(spec, policies, table)
            results.append(
                CheckResult(f"elbo_random_{i}[{spec_name}]", res.lhs, res.rhs, res.error, res.passed)
            )
    return results
