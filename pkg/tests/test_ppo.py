import numpy as np
import pytest

from qnctrl import dp, networks, nn, policies, ppo
from qnctrl.errors import UnstablePolicy
from qnctrl.mdp import make_model


@pytest.fixture
def cc_model():
    return make_model(networks.criss_cross("il"))


def xavier_policy(model, seed=0):
    arch = nn.MlpArchitecture.policy(model.num_classes, model.num_stations)
    return nn.xavier_init(arch, np.random.default_rng(seed))


class TestClippedSurrogate:
    def test_ratio_one_gives_mean_advantage(self, cc_model):
        params = xavier_policy(cc_model)
        states = np.array([[1, 1, 0], [2, 0, 1], [0, 1, 1]])
        actions = np.array([[0, 1], [2, -1], [-1, 1]])
        adv = np.array([0.5, -1.5, 2.0])
        logp_old = policies.batch_log_probs(cc_model, params, states, actions)
        loss, grads, frac = ppo.clipped_surrogate(
            cc_model, params, states, actions, adv, logp_old, 0.2
        )
        assert loss == pytest.approx(adv.mean(), abs=1e-9)
        assert frac == 0.0

    def test_positive_advantage_unclipped_branch(self, cc_model):
        params = xavier_policy(cc_model)
        states = np.array([[1, 1, 0]])
        actions = np.array([[0, 1]])
        logp = policies.batch_log_probs(cc_model, params, states, actions)
        # engineered ratio exp(logp - logp_old) = 1.5
        logp_old = logp - np.log(1.5)
        loss, grads, frac = ppo.clipped_surrogate(
            cc_model, params, states, actions, np.array([2.0]), logp_old, 0.2
        )
        assert loss == pytest.approx(3.0, abs=1e-9)
        assert frac == 0.0
        assert any(np.any(g != 0) for gw, gb in grads for g in (gw, gb))

    def test_negative_advantage_clipped_branch_zero_gradient(self, cc_model):
        params = xavier_policy(cc_model)
        states = np.array([[1, 1, 0]])
        actions = np.array([[0, 1]])
        logp = policies.batch_log_probs(cc_model, params, states, actions)
        logp_old = logp - np.log(1.5)
        loss, grads, frac = ppo.clipped_surrogate(
            cc_model, params, states, actions, np.array([-1.0]), logp_old, 0.2
        )
        assert loss == pytest.approx(-1.2, abs=1e-9)
        assert frac == 1.0
        assert all(np.all(gw == 0) and np.all(gb == 0) for gw, gb in grads)


class TestFitValue:
    def test_zero_targets_zero_init_noop(self):
        arch = nn.MlpArchitecture.value(3)
        params = nn.zero_params(arch)
        adam = nn.AdamState(params)
        states = np.array([[1, 0, 2], [0, 1, 1]], dtype=float)
        loss = ppo.fit_value(params, adam, states, np.zeros(2), epochs=3,
                             minibatch=2, learning_rate=1e-3,
                             gen=np.random.default_rng(0))
        assert loss == 0.0
        assert all(np.all(w == 0) for w in params.weights)

    def test_single_state_memorization(self):
        arch = nn.MlpArchitecture.value(2)
        params = nn.xavier_init(arch, np.random.default_rng(1))
        adam = nn.AdamState(params)
        states = np.tile([3.0, 1.0], (32, 1))
        targets = np.full(32, 1.75)
        for _ in range(300):
            ppo.fit_value(params, adam, states, targets, epochs=1, minibatch=32,
                          learning_rate=5e-3, gen=np.random.default_rng(2))
        assert float(nn.forward(params, states[:1])[0, 0]) == pytest.approx(1.75, abs=1e-2)

    def test_loss_decreases_on_linear_targets(self):
        arch = nn.MlpArchitecture.value(1)
        params = nn.xavier_init(arch, np.random.default_rng(3))
        adam = nn.AdamState(params)
        states = np.arange(16, dtype=float)[:, None]
        targets = 0.5 * states.ravel() + 1.0
        gen = np.random.default_rng(4)
        first = ppo.fit_value(params, adam, states, targets, epochs=1,
                              minibatch=8, learning_rate=2e-3, gen=gen)
        for _ in range(60):
            last = ppo.fit_value(params, adam, states, targets, epochs=1,
                                 minibatch=8, learning_rate=2e-3, gen=gen)
        assert last < first


class TestTrainLoop:
    def desk_config(self, **kw):
        base = dict(algorithm=2, iterations=2, num_actors=2, cycles=60, seed=3,
                    minibatch=256, epochs=2)
        base.update(kw)
        return ppo.TrainConfig(**base)

    def test_zero_iterations_returns_initial(self, cc_model, tmp_path):
        cfg = self.desk_config(iterations=0)
        result = ppo.train(cc_model, cfg, run_dir=tmp_path)
        assert result.reports == []
        ref = nn.xavier_init(
            nn.MlpArchitecture.policy(3, 2),
            __import__("qnctrl.rng", fromlist=["philox_generator"]).philox_generator(
                3, ppo._INIT_KEY
            ),
        )
        for w1, w2 in zip(result.policy_params.weights, ref.weights):
            assert np.array_equal(w1, w2)
        assert (tmp_path / "checkpoints" / "checkpoint_0000.json").exists()

    def test_zero_learning_rates_leave_policy_unchanged(self, cc_model):
        cfg = self.desk_config(iterations=1, policy_lr_base=0.0, value_lr=0.0)
        result = ppo.train(cc_model, cfg)
        ref = ppo.train(cc_model, self.desk_config(iterations=0))
        for w1, w2 in zip(result.policy_params.weights, ref.policy_params.weights):
            assert np.array_equal(w1, w2)
        for w1, w2 in zip(result.value_params.weights, ref.value_params.weights):
            assert np.array_equal(w1, w2)

    def test_worker_count_invariance(self, cc_model):
        results = [
            ppo.train(cc_model, self.desk_config(workers=w)) for w in (1, 3)
        ]
        a, b = results
        for ra, rb in zip(a.reports, b.reports):
            assert ra.avg_cost == rb.avg_cost
            assert ra.value_loss == rb.value_loss
            assert ra.surrogate_loss == rb.surrogate_loss
        for w1, w2 in zip(a.policy_params.weights, b.policy_params.weights):
            assert np.array_equal(w1, w2)

    def test_reports_and_checkpoints_written(self, cc_model, tmp_path):
        cfg = self.desk_config(iterations=3, checkpoint_every=2)
        result = ppo.train(cc_model, cfg, run_dir=tmp_path)
        assert len(result.reports) == 3
        assert (tmp_path / "reports.csv").exists()
        names = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.json"))
        assert names == ["checkpoint_0000.json", "checkpoint_0002.json",
                         "checkpoint_0003.json"]
        assert all(np.isfinite(r.avg_cost) for r in result.reports)

    def test_unstable_policy_raises(self, tmp_path):
        model = make_model(networks.criss_cross("bh"))
        cfg = ppo.TrainConfig(algorithm=2, iterations=1, num_actors=1,
                              cycles=10_000, seed=0, max_steps_per_actor=200)
        with pytest.raises(UnstablePolicy):
            ppo.train(model, cfg)

    def test_algorithm3_runs_with_pool_and_r_star(self, cc_model):
        cfg = ppo.TrainConfig(algorithm=3, iterations=2, num_actors=3,
                              horizon=300, tail=120, gamma=0.99, lam=0.95,
                              seed=1, minibatch=256, epochs=2)
        result = ppo.train(cc_model, cfg)
        assert all(r.r_star is not None and np.isfinite(r.r_star)
                   for r in result.reports)
        assert all(r.samples == 3 * 300 for r in result.reports)

    def test_gae_variant_runs(self, cc_model):
        cfg = ppo.TrainConfig(algorithm=3, iterations=1, num_actors=2,
                              horizon=200, tail=80, gamma=0.99, lam=0.95,
                              estimator="gae", seed=2, minibatch=128)
        result = ppo.train(cc_model, cfg)
        assert len(result.reports) == 1

    def test_desk_scale_improves_over_random_init(self, cc_model):
        cfg = ppo.TrainConfig(algorithm=2, iterations=8, num_actors=2,
                              cycles=150, seed=5, minibatch=512, epochs=3)
        result = ppo.train(cc_model, cfg)
        box = dp.TruncationBox((12, 12, 12))
        first = ppo.train(cc_model, ppo.TrainConfig(
            algorithm=2, iterations=0, num_actors=2, cycles=150, seed=5))
        init_avg, _ = dp.evaluate_policy_exact(
            cc_model, policies.NeuralPolicy(first.policy_params), box)
        final_avg, _ = dp.evaluate_policy_exact(
            cc_model, policies.NeuralPolicy(result.policy_params), box)
        assert final_avg <= init_avg
