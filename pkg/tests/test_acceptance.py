"""End-to-end acceptance criteria.

Each test prints exactly one PASS/FAIL line so the suite doubles as a
checklist. Tolerances and budgets are asserted as stated, never loosened:
a criterion that cannot be met fails loudly here.
"""

import time

import numpy as np
import pytest

from air_marl import air_explore as ax
from air_marl import autodiff as ad, envs, identity_classifier as ic, nn, oracle
from air_marl import replay, trainer
from air_marl import value_decomposition as vd

from test_autodiff import assert_grad_close


def _report(num, name, ok, detail=""):
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_1_oracle_suite():
    t0 = time.perf_counter()
    results = oracle.run_all_checks()
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    # identities must agree to 1e-10; the lower-bound checks are one-sided
    # (any positive slack is fine) so only their negative margin counts
    is_bound = lambda r: r.name.startswith(("elbo_uniform", "elbo_random"))
    worst_identity = max(abs(r.error) for r in results if not is_bound(r))
    worst_margin = min(r.error for r in results if is_bound(r))
    ok = (
        not failed
        and worst_identity <= 1e-10
        and worst_margin >= -1e-9
        and elapsed < 10.0
    )
    _report(
        1, "oracle identity suite", ok,
        f"{len(results)} checks, {len(failed)} failed, "
        f"worst identity |error| {worst_identity:.3e} (tol 1e-10), "
        f"worst bound margin {worst_margin:.3e} (tol -1e-9), "
        f"{elapsed:.2f}s (budget 10s)",
    )


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []

    def check(name, fn, params):
        try:
            assert_grad_close(fn, params, rel=1e-4, eps=1e-5)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")

    # agent GRU + head through a 3-step unroll
    aspec = vd.AgentNetSpec(obs_dim=4, n_actions=3, hidden_dim=5)
    aparams = {}
    vd.init_agent_net(np.random.default_rng(1), aspec, aparams)
    obs = [rng.normal(size=(2, 4)) for _ in range(3)]
    prev = [np.zeros((2, 3))] + [np.eye(3)[rng.integers(0, 3, 2)] for _ in range(2)]

    def agent_fn():
        h = vd.initial_hidden(aspec, 2)
        total = None
        for o, p in zip(obs, prev):
            q, h = vd.agent_q(aspec, aparams, o, p, h)
            s = ad.sum_(q)
            total = s if total is None else ad.add(total, s)
        return total

    check("agent_net", agent_fn, aparams)

    # QMIX mixer + hypernets, including gradients into the agent values
    mspec = vd.QmixSpec(n_agents=3, state_dim=4, mix_dim=5, hyper_hidden=6)
    mparams = {}
    vd.init_qmix(np.random.default_rng(2), mspec, mparams)
    q_in = ad.tensor(rng.normal(size=(4, 3)), requires_grad=True)
    state = rng.normal(size=(4, 4))
    mparams["q_in"] = q_in
    check("qmix", lambda: ad.sum_(vd.qmix_mix(mspec, mparams, q_in, state)), mparams)

    # identity classifier cross-entropy
    cspec = ic.ClassifierSpec(obs_dim=3, n_actions=3, n_agents=2, hidden_dim=4)
    cparams = {}
    ic.init_classifier(np.random.default_rng(3), cspec, cparams)
    cobs = rng.normal(size=(4, 3))
    cprev = np.eye(3)[rng.integers(0, 3, 4)]
    labels = np.array([0, 1, 0, 1])
    acts = rng.integers(0, 3, 4)

    def clf_fn():
        log_q, _ = ic.classify(cspec, cparams, cobs, cprev, ic.initial_hidden(cspec, 4))
        flat = ad.reshape(log_q, (4, 6))
        return ad.neg(ad.mean_(ad.take_along(flat, acts * 2 + labels)))

    check("classifier", clf_fn, cparams)

    # full TD objective on a short multi-step batch
    env = envs.make_env("spread")
    erng = np.random.default_rng(4)
    episodes = []
    for _ in range(2):
        step = env.reset(seed=int(erng.integers(1 << 30)))
        o, s, av = [step.obs], [step.state], [step.masks]
        a, r, term = [], [], []
        while not step.terminated:
            joint = erng.integers(0, env.n_actions, size=env.n_agents)
            step = env.step(joint)
            a.append(joint); r.append(step.reward); term.append(float(step.terminated))
            o.append(step.obs); s.append(step.state); av.append(step.masks)
        episodes.append(replay.Episode(np.stack(o), np.stack(s), np.stack(a),
                                       np.array(r), np.stack(av), np.array(term)))
    batch = replay.batch_episodes(episodes)
    for arr in ("obs", "state", "avail"):
        setattr(batch, arr, getattr(batch, arr)[:, :4])
    for arr in ("actions", "reward", "terminal", "mask"):
        setattr(batch, arr, getattr(batch, arr)[:, :3])
    tspec = vd.AgentNetSpec(env.obs_dim, env.n_actions, 4)
    tmix = vd.QmixSpec(env.n_agents, env.state_dim, 3, 4)
    tparams = {}
    trng = np.random.default_rng(5)
    vd.init_agent_net(trng, tspec, tparams)
    vd.init_qmix(trng, tmix, tparams)
    target = nn.snapshot(tparams)
    check("td_loss", lambda: vd.td_loss(batch, tspec, "qmix", tmix, tparams, target), tparams)

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60.0
    _report(
        2, "gradient suite", ok,
        f"4 networks checked, failures={failures or 'none'}, "
        f"{elapsed:.2f}s (budget 60s)",
    )


def test_criterion_3_alpha_zero_degeneracy():
    t0 = time.perf_counter()

    def run(air_on):
        cfg = trainer.TrainConfig(
            env="climb", mixer="vdn", total_steps=1000, seed=0,
            air_enabled=air_on, train_classifier=True, alpha_lr=0.0,
        )
        tr = trainer.Trainer(cfg)
        while tr.env_steps < cfg.total_steps:
            tr.train_iteration()
        return tr

    a = run(True)   # AIR selection path with the temperature pinned at zero
    b = run(False)  # plain value-decomposition selection

    steps = min(a.env_steps, b.env_steps)
    episodes_equal = len(a.buffer) == len(b.buffer) and all(
        np.array_equal(a.buffer.episode_at(i).actions, b.buffer.episode_at(i).actions)
        and np.array_equal(a.buffer.episode_at(i).reward, b.buffer.episode_at(i).reward)
        and np.array_equal(a.buffer.episode_at(i).obs, b.buffer.episode_at(i).obs)
        for i in range(len(a.buffer))
    )
    rows_a = [trainer.format_metrics_row(r) for r in a.metrics_rows]
    rows_b = [trainer.format_metrics_row(r) for r in b.metrics_rows]
    metrics_equal = rows_a == rows_b
    params_equal = all(
        np.array_equal(a.params[k].data, b.params[k].data) for k in a.params
    )
    ok = steps >= 1000 and episodes_equal and metrics_equal and params_equal
    _report(
        3, "alpha=0 degeneracy", ok,
        f"{steps} env steps, episode streams identical={episodes_equal}, "
        f"metrics identical={metrics_equal}, parameters identical={params_equal}, "
        f"{time.perf_counter() - t0:.1f}s",
    )


def test_criterion_4_temperature_mechanics():
    failures = []
    rng = np.random.default_rng(0)
    # update arithmetic on synthetic batches
    for _ in range(200):
        alpha = float(rng.normal())
        h_bar = float(rng.uniform(0.0, 2.0))
        lr = float(rng.uniform(1e-5, 0.1))
        batch = -rng.uniform(0.01, 4.0, size=rng.integers(1, 50))
        state = ax.TemperatureState(alpha=alpha, target_entropy_bar=h_bar)
        out = ax.temperature_step(state, batch, lr=lr)
        expected = alpha + lr * (batch.mean() + h_bar)
        if abs(out.alpha - expected) > 1e-12:
            failures.append(f"update off by {abs(out.alpha - expected):.3e}")
            break

    # the three arithmetic examples, exactly
    s = ax.TemperatureState(alpha=0.3, target_entropy_bar=0.7)
    if ax.temperature_step(s, np.array([-0.7]), lr=1.0).alpha != 0.3:
        failures.append("zero-gradient example")
    if abs(ax.temperature_step(s, np.array([-0.5]), lr=1.0).alpha - 0.5) > 1e-12:
        failures.append("+0.2 gradient example")
    if abs(ax.temperature_step(s, np.array([-2.0]), lr=1.0).alpha - (-1.0)) > 1e-12:
        failures.append("-1.3 gradient example")

    # mode switching: a seeded statistic schedule drives alpha across zero
    state = ax.initial_temperature(n_agents=2)
    seen_pos = seen_neg = False
    srng = np.random.default_rng(7)
    for i in range(400):
        scale = 0.2 if i < 200 else 2.5  # confident phase, then confused phase
        stats = -srng.uniform(0.5 * scale, scale, size=8)
        state = ax.update_target_entropy(state, float(-stats.mean()))
        state = ax.temperature_step(state, stats, lr=0.05)
        seen_pos |= state.alpha > 1e-6
        seen_neg |= state.alpha < -1e-6
    if not (seen_pos and seen_neg):
        failures.append(f"no sign switch (pos={seen_pos}, neg={seen_neg})")

    ok = not failures
    _report(4, "temperature mechanics", ok, f"failures={failures or 'none'}")


def test_criterion_5_qmix_monotonicity():
    t0 = time.perf_counter()
    n_draws, n_probes, eps = 1000, 1000, 1e-6
    spec = vd.QmixSpec(n_agents=2, state_dim=3, mix_dim=32, hyper_hidden=64)
    worst = np.inf
    for draw in range(n_draws):
        rng = np.random.default_rng([11, draw])
        params = {}
        vd.init_qmix(rng, spec, params)
        q = rng.normal(size=(n_probes, spec.n_agents)) * 3.0
        state = rng.normal(size=(n_probes, 3))
        base = vd.qmix_mix(spec, params, q, state).data
        for k in range(spec.n_agents):
            up = q.copy()
            up[:, k] += eps
            d = (vd.qmix_mix(spec, params, up, state).data - base) / eps
            worst = min(worst, float(d.min()))
    ok = worst >= -1e-12
    _report(
        5, "qmix monotonicity", ok,
        f"{n_draws} draws x {n_probes} probes, min dQtot/dQa {worst:.3e}, "
        f"{time.perf_counter() - t0:.1f}s",
    )


def test_criterion_6_matrix_game_learning():
    t0 = time.perf_counter()
    outcomes = {}
    for env_name in ("climb", "penalty"):
        wins = 0
        per_seed = []
        env = envs.make_env(env_name)
        for seed in range(5):
            cfg = trainer.TrainConfig(
                env=env_name, mixer="qmix", total_steps=20000, seed=seed
            )
            tr = trainer.Trainer(cfg)
            while tr.env_steps < cfg.total_steps:
                tr.train_iteration()
            ep = trainer.greedy_episode(tr.env, tr.agent_spec, tr.params, [seed, 9, 0])
            optimal = ep.return_ >= env.optimal_return - 1e-9
            wins += optimal
            per_seed.append(f"seed{seed}:{ep.return_:g}")
        outcomes[env_name] = (wins, per_seed)
    elapsed = time.perf_counter() - t0
    climb_wins = outcomes["climb"][0]
    penalty_wins = outcomes["penalty"][0]
    ok = climb_wins >= 4 and penalty_wins >= 3 and elapsed < 600.0
    _report(
        6, "matrix game learning", ok,
        f"climb {climb_wins}/5 optimal (need 4) {outcomes['climb'][1]}; "
        f"penalty {penalty_wins}/5 optimal (need 3) {outcomes['penalty'][1]}; "
        f"{elapsed:.0f}s (budget 600s)",
    )


def test_criterion_7_diversity_signal():
    t0 = time.perf_counter()

    def run(air_on):
        cfg = trainer.TrainConfig(
            env="spread", mixer="vdn", hidden_dim=32, batch_size=16,
            total_steps=200000, seed=0,
            air_enabled=air_on, train_classifier=True,
        )
        tr = trainer.Trainer(cfg)
        while tr.env_steps < cfg.total_steps:
            tr.train_iteration()
        return trainer.heldout_classifier_accuracy(tr)

    air_acc = run(True)
    ablation_acc = run(False)
    elapsed = time.perf_counter() - t0
    ok = air_acc > 0.5 and air_acc > ablation_acc and elapsed < 1800.0
    _report(
        7, "diversity signal", ok,
        f"AIR held-out accuracy {air_acc:.3f} (need > 0.5), "
        f"alpha=0 ablation {ablation_acc:.3f} (need AIR > ablation), "
        f"{elapsed:.0f}s (budget 1800s)",
    )


def test_criterion_8_determinism_and_plumbing(tmp_path):
    t0 = time.perf_counter()
    failures = []

    # byte-identical metrics for a repeated seed
    cfg = trainer.TrainConfig(
        env="climb", mixer="qmix", total_steps=300, seed=5,
        hidden_dim=16, mix_dim=8, hyper_hidden=16, batch_size=16,
    )
    _, m1, c1 = trainer.run(cfg, tmp_path / "a")
    _, m2, c2 = trainer.run(cfg, tmp_path / "b")
    if open(m1, "rb").read() != open(m2, "rb").read():
        failures.append("metrics CSVs differ across identical runs")
    if open(c1, "rb").read() != open(c2, "rb").read():
        failures.append("checkpoints differ across identical runs")

    # checkpoint round-trip resumes with the identical next-batch loss
    a = trainer.Trainer(cfg)
    for _ in range(40):
        a.train_iteration()
    b = trainer.Trainer(cfg)
    b.restore(a.checkpoint_bytes())
    batch = a.buffer.sample_batch(16, np.random.default_rng(99))
    la = vd.td_loss(batch, a.agent_spec, "qmix", a.mixer_spec, a.params,
                    a.target_params, cfg.gamma)
    lb = vd.td_loss(batch, b.agent_spec, "qmix", b.mixer_spec, b.params,
                    b.target_params, cfg.gamma)
    if float(la.data) != float(lb.data):
        failures.append(f"resume loss differs: {float(la.data)} vs {float(lb.data)}")

    # FIFO behavior at the stated capacity
    buf = replay.ReplayBuffer(capacity=5000)
    terminal = np.array([1.0])
    for i in range(5003):
        buf.push_episode(replay.Episode(
            obs=np.zeros((2, 2, 3)), state=np.zeros((2, 1)),
            actions=np.zeros((1, 2), dtype=np.intp), reward=np.array([float(i)]),
            avail=np.ones((2, 2, 2), dtype=bool), terminal=terminal,
        ))
    if len(buf) != 5000 or buf.episode_at(0).reward[0] != 3.0:
        failures.append("replay FIFO eviction is not oldest-first at capacity 5000")

    # epsilon schedule hits the published values exactly
    table = {0: 1.0, 10000: 0.81, 25000: 0.525, 50000: 0.05, 90000: 0.05}
    for step, want in table.items():
        got = ax.epsilon_schedule(step)
        if got != want:
            failures.append(f"epsilon({step}) = {got!r}, want {want!r}")

    ok = not failures
    _report(
        8, "determinism & plumbing", ok,
        f"failures={failures or 'none'}, {time.perf_counter() - t0:.1f}s",
    )
