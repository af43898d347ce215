"""Training orchestration: rollout collection with shaped epsilon-greedy
behavior, TD + classifier + temperature updates, periodic target sync, and
metrics logging.

Evaluation episodes are pure greedy on raw Q (no shaping, eps=0) and never
touch the buffer or parameters. Replay-driven updates only ever see executed
actions; the shaped values exist solely in the behavior policy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import air_explore, autodiff as ad, envs, identity_classifier as idc, nn
from . import value_decomposition as vd
from .errors import ContractViolation
from .replay import Episode, ReplayBuffer, batch_episodes

METRICS_COLUMNS = (
    "iter",
    "env_steps",
    "ret_mean",
    "ret_std",
    "td_loss",
    "alpha",
    "h_bar",
    "clf_nll",
    "clf_acc",
    "epsilon",
)


@dataclass(frozen=True)
class TrainConfig:
    env: str = "climb"
    mixer: str = "qmix"
    total_steps: int = 20000
    seed: int = 0
    episodes_per_iter: int = 1
    lr: float = 0.0005
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal: int = 50000
    target_interval: int = 200
    batch_size: int = 32
    buffer_capacity: int = 5000
    air_enabled: bool = True
    train_classifier: bool | None = None  # defaults to air_enabled
    alpha_init: float = 0.0
    alpha_lr: float = 0.0005  # 0 freezes the temperature
    ema_decay: float = 0.99
    hidden_dim: int = 64
    mix_dim: int = 32
    hyper_hidden: int = 64
    n_workers: int = 1
    checkpoint_interval: int = 0  # iterations between checkpoints; 0 = final only

    def __post_init__(self):
        if self.mixer not in ("vdn", "qmix"):
            raise ContractViolation(f"unknown mixer '{self.mixer}'")
        if self.lr <= 0 or self.gamma < 0 or self.gamma >= 1:
            raise ContractViolation("lr must be positive and gamma in [0, 1)")
        if self.eps_anneal <= 0 or self.target_interval <= 0:
            raise ContractViolation("eps_anneal and target_interval must be positive")
        if self.episodes_per_iter < 1 or self.batch_size < 1 or self.n_workers < 1:
            raise ContractViolation("counts must be >= 1")
        if self.total_steps < 0 or self.alpha_lr < 0:
            raise ContractViolation("total_steps and alpha_lr must be >= 0")
        # the anneal window never extends past the run, so epsilon always
        # reaches its floor by the final step
        if 0 < self.total_steps < self.eps_anneal:
            object.__setattr__(self, "eps_anneal", self.total_steps)

    @property
    def classifier_trained(self):
        return self.air_enabled if self.train_classifier is None else self.train_classifier


def _episode_seed(seed, stream, episode_idx):
    return [int(seed), int(stream), int(episode_idx)]


class Trainer:
    def __init__(self, config: TrainConfig):
        if config.air_enabled and not config.classifier_trained:
            raise ContractViolation("AIR requires the identity classifier to train")
        self.config = config
        self.env = envs.make_env(config.env)
        n, U = self.env.n_agents, self.env.n_actions
        self.agent_spec = vd.AgentNetSpec(self.env.obs_dim, U, config.hidden_dim)
        self.mixer_spec = vd.QmixSpec(
            n, self.env.state_dim, config.mix_dim, config.hyper_hidden
        )
        self.clf_spec = idc.ClassifierSpec(
            self.env.obs_dim - n, U, n, config.hidden_dim
        )

        init_rng = np.random.default_rng([config.seed, 0])
        self.params: dict = {}
        vd.init_agent_net(init_rng, self.agent_spec, self.params)
        if config.mixer == "qmix":
            vd.init_qmix(init_rng, self.mixer_spec, self.params)
        self.clf_params: dict = {}
        idc.init_classifier(init_rng, self.clf_spec, self.clf_params)
        self.target_params = nn.snapshot(self.params)

        self.adam = ad.AdamState()
        self.clf_adam = ad.AdamState()
        self.temperature = air_explore.TemperatureState(
            alpha=config.alpha_init,
            target_entropy_bar=float(np.log(n)),
            ema_decay=config.ema_decay,
        )
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.batch_rng = np.random.default_rng([config.seed, 1])
        self.worker_envs = [
            envs.make_env(config.env)
            for _ in range(min(config.n_workers, config.episodes_per_iter))
        ]

        self.env_steps = 0
        self.iteration = 0
        self.updates = 0
        self._episode_counter = 0
        self.metrics_rows = []

    # -- rollout ------------------------------------------------------------

    def _rollout(self, env, env_seed, action_rng, eps, alpha, shaped, record=True):
        """One episode. With shaped=False behavior is plain greedy on Q."""
        n, U = env.n_agents, env.n_actions
        step = env.reset(seed=env_seed)
        agent_hidden = np.zeros((n, self.agent_spec.hidden_dim))
        clf_hidden = np.zeros((n, self.clf_spec.hidden_dim))
        prev_onehot = np.zeros((n, U))
        obs_list, state_list, avail_list = [step.obs], [step.state], [step.masks]
        actions, rewards, terminals = [], [], []
        while True:
            q, agent_hidden = vd.agent_q_np(
                self.agent_spec, self.params, step.obs, prev_onehot, agent_hidden
            )
            if shaped:
                log_q, clf_hidden = idc.classify_np(
                    self.clf_spec,
                    self.clf_params,
                    idc.strip_agent_id(step.obs, n),
                    prev_onehot,
                    clf_hidden,
                )
            joint = np.zeros(n, dtype=np.intp)
            for k in range(n):
                row = log_q[k, :, k] if shaped else np.zeros(U)
                sq = air_explore.shaped_q(q[k], row, alpha if shaped else 0.0, step.masks[k])
                joint[k] = air_explore.select_action(sq, eps, action_rng)
            step = env.step(joint)
            actions.append(joint)
            rewards.append(step.reward)
            terminals.append(1.0 if step.terminated else 0.0)
            obs_list.append(step.obs)
            state_list.append(step.state)
            avail_list.append(step.masks)
            prev_onehot = np.zeros((n, U))
            prev_onehot[np.arange(n), joint] = 1.0
            if step.terminated:
                break
        return Episode(
            obs=np.stack(obs_list),
            state=np.stack(state_list),
            actions=np.stack(actions),
            reward=np.array(rewards),
            avail=np.stack(avail_list),
            terminal=np.array(terminals),
        )

    def collect_episodes(self, eps):
        """M episodes under the current parameters (no gradients are taped).

        Episode seeds derive from a global episode index, so partitioning the
        indices over workers changes nothing about the resulting multiset.
        """
        cfg = self.config
        episodes = []
        for m in range(cfg.episodes_per_iter):
            idx = self._episode_counter
            self._episode_counter += 1
            env = self.worker_envs[m % len(self.worker_envs)]
            action_rng = np.random.default_rng(_episode_seed(cfg.seed, 3, idx))
            episodes.append(
                self._rollout(
                    env,
                    _episode_seed(cfg.seed, 2, idx),
                    action_rng,
                    eps,
                    self.temperature.alpha,
                    shaped=cfg.air_enabled,
                )
            )
        return episodes

    # -- updates ------------------------------------------------------------

    def train_iteration(self):
        cfg = self.config
        eps = air_explore.epsilon_schedule(
            self.env_steps, cfg.eps_start, cfg.eps_end, cfg.eps_anneal
        )
        episodes = self.collect_episodes(eps)
        returns = np.array([ep.return_ for ep in episodes])
        for ep in episodes:
            self.buffer.push_episode(ep)
            self.env_steps += ep.length

        td = clf_nll = clf_acc = float("nan")
        if self.buffer.can_sample(cfg.batch_size):
            batch = self.buffer.sample_batch(cfg.batch_size, self.batch_rng)
            with ad.Tape() as tape:
                loss = vd.td_loss(
                    batch,
                    self.agent_spec,
                    cfg.mixer,
                    self.mixer_spec,
                    self.params,
                    self.target_params,
                    cfg.gamma,
                )
                ad.zero_grads(self.params)
                tape.backward(loss)
            ad.adam_step(self.params, self.adam, cfg.lr)
            td = float(loss.data)

            if cfg.classifier_trained:
                clf_nll, clf_acc, chosen_log_q = idc.classifier_train_step(
                    self.clf_spec, self.clf_params, self.clf_adam, batch, cfg.lr
                )
                if cfg.air_enabled and cfg.alpha_lr > 0:
                    # H-bar first; both terms use the pre-update classifier
                    # outputs. alpha_lr=0 freezes the whole temperature state:
                    # with dual ascent disabled the EMA has nothing to serve.
                    self.temperature = air_explore.update_target_entropy(
                        self.temperature, -chosen_log_q.mean()
                    )
                    self.temperature = air_explore.temperature_step(
                        self.temperature, chosen_log_q, cfg.alpha_lr
                    )

            self.updates += 1
            if self.updates % cfg.target_interval == 0:
                self.target_params = nn.snapshot(self.params)

        self.iteration += 1
        row = {
            "iter": self.iteration,
            "env_steps": self.env_steps,
            "ret_mean": float(returns.mean()),
            "ret_std": float(returns.std()),
            "td_loss": td,
            "alpha": self.temperature.alpha,
            "h_bar": self.temperature.target_entropy_bar,
            "clf_nll": clf_nll,
            "clf_acc": clf_acc,
            "epsilon": eps,
        }
        self.metrics_rows.append(row)
        return row

    # -- persistence ----------------------------------------------------------

    def checkpoint_bytes(self):
        merged = dict(self.params)
        merged.update(self.clf_params)
        # the target net rides along so a resumed run bootstraps against the
        # same values it would have mid-interval
        for name, p in self.target_params.items():
            merged[f"target.{name}"] = p
        merged["temp.alpha"] = ad.tensor(np.array(self.temperature.alpha))
        merged["temp.h_bar"] = ad.tensor(np.array(self.temperature.target_entropy_bar))
        return nn.save_params(merged)

    def restore(self, blob):
        loaded = nn.load_params(blob, requires_grad=False)
        self.temperature = replace(
            self.temperature,
            alpha=float(loaded.pop("temp.alpha").data),
            target_entropy_bar=float(loaded.pop("temp.h_bar").data),
        )
        for name in self.params:
            if name not in loaded:
                raise ContractViolation(f"checkpoint missing tensor '{name}'")
            self.params[name].data = loaded[name].data
        for name in self.clf_params:
            if name not in loaded:
                raise ContractViolation(f"checkpoint missing tensor '{name}'")
            self.clf_params[name].data = loaded[name].data
        for name in self.target_params:
            key = f"target.{name}"
            if key not in loaded:
                raise ContractViolation(f"checkpoint missing tensor '{key}'")
            self.target_params[name].data = loaded[key].data


def format_metrics_row(row):
    return ",".join(
        (
            str(row[c])
            if c in ("iter", "env_steps")
            else format(row[c], ".12g")
        )
        for c in METRICS_COLUMNS
    )


def run(config: TrainConfig, run_dir):
    """Alternate collect/train until total steps; write metrics and checkpoints."""
    os.makedirs(run_dir, exist_ok=True)
    trainer = Trainer(config)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    ckpt_path = os.path.join(run_dir, "final.ckpt")
    with open(metrics_path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        fh.flush()
        if config.total_steps == 0:
            with open(ckpt_path, "wb") as cf:
                cf.write(trainer.checkpoint_bytes())
        while trainer.env_steps < config.total_steps:
            row = trainer.train_iteration()
            fh.write(format_metrics_row(row) + "\n")
            fh.flush()
            if (
                config.checkpoint_interval
                and trainer.iteration % config.checkpoint_interval == 0
            ):
                tmp = os.path.join(run_dir, f"ckpt_{trainer.iteration:08d}.ckpt")
                with open(tmp, "wb") as cf:
                    cf.write(trainer.checkpoint_bytes())
    with open(ckpt_path, "wb") as cf:
        cf.write(trainer.checkpoint_bytes())
    return trainer, metrics_path, ckpt_path


# ---------------------------------------------------------------------------
# evaluation


def greedy_episode(env, agent_spec, params, env_seed):
    """One pure-greedy episode (eps=0, no shaping); returns the Episode."""
    n, U = env.n_agents, env.n_actions
    step = env.reset(seed=env_seed)
    hidden = np.zeros((n, agent_spec.hidden_dim))
    prev_onehot = np.zeros((n, U))
    obs_list, state_list, avail_list = [step.obs], [step.state], [step.masks]
    actions, rewards, terminals = [], [], []
    while True:
        q, hidden = vd.agent_q_np(agent_spec, params, step.obs, prev_onehot, hidden)
        joint = vd.greedy_actions(q, step.masks)
        step = env.step(joint)
        actions.append(joint)
        rewards.append(step.reward)
        terminals.append(1.0 if step.terminated else 0.0)
        obs_list.append(step.obs)
        state_list.append(step.state)
        avail_list.append(step.masks)
        prev_onehot = np.zeros((n, U))
        prev_onehot[np.arange(n), joint] = 1.0
        if step.terminated:
            break
    return Episode(
        obs=np.stack(obs_list),
        state=np.stack(state_list),
        actions=np.stack(actions),
        reward=np.array(rewards),
        avail=np.stack(avail_list),
        terminal=np.array(terminals),
    )


def evaluate(env, agent_spec, params, n_episodes, seed):
    """Greedy evaluation: (mean return, solve rate or nan, episodes)."""
    if n_episodes < 1:
        raise ContractViolation("n_episodes must be >= 1")
    episodes = [
        greedy_episode(env, agent_spec, params, _episode_seed(seed, 9, i))
        for i in range(n_episodes)
    ]
    returns = np.array([ep.return_ for ep in episodes])
    solve_rate = float("nan")
    optimal = getattr(env, "optimal_return", None)
    if optimal is not None:
        solve_rate = float((returns >= optimal - 1e-9).mean())
    return float(returns.mean()), solve_rate, episodes


def heldout_classifier_accuracy(trainer: Trainer, n_episodes=64, seed=777):
    """Classifier accuracy on freshly collected greedy episodes."""
    episodes = [
        greedy_episode(
            trainer.env, trainer.agent_spec, trainer.params, _episode_seed(seed, 11, i)
        )
        for i in range(n_episodes)
    ]
    batch = batch_episodes(episodes)
    _, acc = idc.evaluate_classifier(trainer.clf_spec, trainer.clf_params, batch)
    return acc
