import numpy as np
import pytest

from air_marl import autodiff as ad, envs, nn, replay, trainer
from air_marl import value_decomposition as vd
from air_marl.errors import ContractViolation

from test_autodiff import assert_grad_close


def make_batch(env_name="climb", n_episodes=4, seed=0):
    env = envs.make_env(env_name)
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(n_episodes):
        step = env.reset(seed=int(rng.integers(1 << 30)))
        obs, state, avail = [step.obs], [step.state], [step.masks]
        actions, rewards, terminals = [], [], []
        while not step.terminated:
            joint = rng.integers(0, env.n_actions, size=env.n_agents)
            step = env.step(joint)
            actions.append(joint)
            rewards.append(step.reward)
            terminals.append(1.0 if step.terminated else 0.0)
            obs.append(step.obs)
            state.append(step.state)
            avail.append(step.masks)
        episodes.append(
            replay.Episode(
                obs=np.stack(obs),
                state=np.stack(state),
                actions=np.stack(actions),
                reward=np.array(rewards),
                avail=np.stack(avail),
                terminal=np.array(terminals),
            )
        )
    return env, replay.batch_episodes(episodes)


class TestAgentNet:
    def test_obs_width_checked(self):
        spec = vd.AgentNetSpec(obs_dim=4, n_actions=3, hidden_dim=8)
        params = {}
        vd.init_agent_net(np.random.default_rng(0), spec, params)
        with pytest.raises(ContractViolation):
            vd.agent_q(spec, params, np.zeros((2, 5)), np.zeros((2, 3)), vd.initial_hidden(spec, 2))

    def test_output_shape(self):
        spec = vd.AgentNetSpec(obs_dim=4, n_actions=3, hidden_dim=8)
        params = {}
        vd.init_agent_net(np.random.default_rng(0), spec, params)
        q, h = vd.agent_q(spec, params, np.zeros((5, 4)), np.zeros((5, 3)), vd.initial_hidden(spec, 5))
        assert q.data.shape == (5, 3)
        assert h.data.shape == (5, 8)

    def test_param_count_regression(self):
        """Fixed architecture sizes should never drift silently."""
        spec = vd.AgentNetSpec(obs_dim=4, n_actions=3, hidden_dim=64)
        params = {}
        vd.init_agent_net(np.random.default_rng(0), spec, params)
        # fc: 7*64+64, gru: 3*(64*64)+3*(64*64)+4*64, head: 64*3+3
        assert nn.param_count(params) == (7 * 64 + 64) + (6 * 64 * 64 + 4 * 64) + (64 * 3 + 3)

    def test_gradcheck_through_unroll(self):
        spec = vd.AgentNetSpec(obs_dim=3, n_actions=2, hidden_dim=4)
        params = {}
        vd.init_agent_net(np.random.default_rng(1), spec, params)
        rng = np.random.default_rng(2)
        obs = [rng.normal(size=(2, 3)) for _ in range(3)]
        prev = [np.zeros((2, 2)) for _ in range(3)]

        def f():
            h = vd.initial_hidden(spec, 2)
            total = None
            for o, p in zip(obs, prev):
                q, h = vd.agent_q(spec, params, o, p, h)
                s = ad.sum_(q)
                total = s if total is None else ad.add(total, s)
            return total

        assert_grad_close(f, params)


class TestMixers:
    def test_vdn_sums(self):
        q = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.5]])
        np.testing.assert_allclose(vd.vdn_mix(q), [6.0, 0.0])
        t = ad.tensor(q)
        np.testing.assert_allclose(vd.vdn_mix(t).data, [6.0, 0.0])

    def test_qmix_output_shape(self):
        spec = vd.QmixSpec(n_agents=3, state_dim=5, mix_dim=4, hyper_hidden=8)
        params = {}
        vd.init_qmix(np.random.default_rng(0), spec, params)
        out = vd.qmix_mix(spec, params, np.zeros((7, 3)), np.zeros((7, 5)))
        assert out.data.shape == (7,)

    def test_qmix_monotone_in_each_agent(self):
        rng = np.random.default_rng(3)
        spec = vd.QmixSpec(n_agents=2, state_dim=3, mix_dim=4, hyper_hidden=8)
        params = {}
        vd.init_qmix(rng, spec, params)
        state = rng.normal(size=(1, 3))
        q = rng.normal(size=(1, 2))
        base = float(vd.qmix_mix(spec, params, q, state).data[0])
        for k in range(2):
            bumped = q.copy()
            bumped[0, k] += 0.37
            assert float(vd.qmix_mix(spec, params, bumped, state).data[0]) >= base - 1e-12

    def test_qmix_fd_partials_nonnegative(self):
        rng = np.random.default_rng(4)
        spec = vd.QmixSpec(n_agents=2, state_dim=3, mix_dim=4, hyper_hidden=8)
        params = {}
        vd.init_qmix(rng, spec, params)
        eps = 1e-6
        for _ in range(50):
            state = rng.normal(size=(1, 3))
            q = rng.normal(size=(1, 2))
            for k in range(2):
                up, dn = q.copy(), q.copy()
                up[0, k] += eps
                dn[0, k] -= eps
                d = (
                    float(vd.qmix_mix(spec, params, up, state).data[0])
                    - float(vd.qmix_mix(spec, params, dn, state).data[0])
                ) / (2 * eps)
                assert d >= -1e-12

    def test_qmix_gradcheck(self):
        spec = vd.QmixSpec(n_agents=2, state_dim=3, mix_dim=4, hyper_hidden=6)
        params = {}
        vd.init_qmix(np.random.default_rng(5), spec, params)
        rng = np.random.default_rng(6)
        q = ad.tensor(rng.normal(size=(3, 2)), requires_grad=True)
        state = rng.normal(size=(3, 3))
        params = dict(params, q_in=q)
        assert_grad_close(lambda: ad.sum_(vd.qmix_mix(spec, params, q, state)), params)

    def test_mix_dispatch(self):
        with pytest.raises(ContractViolation):
            vd.mix("qtran", None, {}, np.zeros((1, 2)), np.zeros((1, 1)))


class TestGreedy:
    def test_mask_respected(self):
        q = np.array([[5.0, 1.0, 0.0]])
        masks = np.array([[False, True, True]])
        assert vd.greedy_actions(q, masks)[0] == 1

    def test_tie_breaks_low_index(self):
        q = np.zeros((1, 4))
        masks = np.ones((1, 4), dtype=bool)
        assert vd.greedy_actions(q, masks)[0] == 0


class TestTdLoss:
    def _setup(self, env_name="climb", hidden=8, mixer="qmix", seed=0):
        env, batch = make_batch(env_name, seed=seed)
        agent_spec = vd.AgentNetSpec(env.obs_dim, env.n_actions, hidden)
        mixer_spec = vd.QmixSpec(env.n_agents, env.state_dim, 4, 8)
        params = {}
        rng = np.random.default_rng(seed)
        vd.init_agent_net(rng, agent_spec, params)
        if mixer == "qmix":
            vd.init_qmix(rng, mixer_spec, params)
        target = nn.snapshot(params)
        return env, batch, agent_spec, mixer_spec, params, target

    def test_terminal_drops_bootstrap(self):
        """On one-shot episodes the target is the reward alone."""
        env, batch, aspec, mspec, params, target = self._setup()
        loss = vd.td_loss(batch, aspec, "vdn", None, params, target, gamma=0.99)
        qs = vd.unroll_agent_q(aspec, params, batch, 1)[0]
        B, n = batch.actions.shape[0], env.n_agents
        chosen = qs.data[np.arange(B * n), batch.actions[:, 0].reshape(-1)].reshape(B, n)
        expected = np.mean((chosen.sum(-1) - batch.reward[:, 0]) ** 2)
        assert float(loss.data) == pytest.approx(expected, rel=1e-12)

    def test_overfit_fixed_batch_decreases(self):
        env, batch, aspec, mspec, params, target = self._setup()
        state = ad.AdamState()
        losses = []
        for _ in range(50):
            with ad.Tape() as tape:
                loss = vd.td_loss(batch, aspec, "qmix", mspec, params, target)
                ad.zero_grads(params)
                tape.backward(loss)
            ad.adam_step(params, state, lr=0.01)
            losses.append(float(loss.data))
        assert losses[-1] < losses[0]
        assert losses[-1] < 0.5 * losses[0]

    def test_gradcheck_multistep(self):
        env, batch, aspec, mspec, params, target = self._setup("spread", hidden=4)
        # trim to 3 steps so finite differences stay fast
        batch.obs = batch.obs[:2, :4]
        batch.state = batch.state[:2, :4]
        batch.actions = batch.actions[:2, :3]
        batch.reward = batch.reward[:2, :3]
        batch.avail = batch.avail[:2, :4]
        batch.terminal = batch.terminal[:2, :3]
        batch.mask = batch.mask[:2, :3]
        aspec = vd.AgentNetSpec(env.obs_dim, env.n_actions, 4)
        mspec = vd.QmixSpec(env.n_agents, env.state_dim, 3, 4)
        params = {}
        rng = np.random.default_rng(9)
        vd.init_agent_net(rng, aspec, params)
        vd.init_qmix(rng, mspec, params)
        target = nn.snapshot(params)
        assert_grad_close(
            lambda: vd.td_loss(batch, aspec, "qmix", mspec, params, target), params
        )

    def test_target_params_receive_no_gradient(self):
        env, batch, aspec, mspec, params, target = self._setup("spread")
        target = nn.snapshot(params, requires_grad=True)
        with ad.Tape() as tape:
            loss = vd.td_loss(batch, aspec, "qmix", mspec, params, target)
            ad.zero_grads(params)
            ad.zero_grads(target)
            tape.backward(loss)
        assert all(p.grad is None for p in target.values())

    def test_empty_batch_rejected(self):
        env, batch, aspec, mspec, params, target = self._setup()
        batch.mask[:] = 0.0
        with pytest.raises(ContractViolation):
            vd.td_loss(batch, aspec, "qmix", mspec, params, target)
