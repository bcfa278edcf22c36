import numpy as np
import pytest

from qnctrl import networks, nn, policies
from qnctrl.errors import InsufficientData, ZeroProbabilityAction
from qnctrl.mdp import make_model
from qnctrl.networks import IDLE
from qnctrl.rng import stream_for


@pytest.fixture
def cc_model():
    return make_model(networks.criss_cross("im"))


@pytest.fixture
def nm_model():
    return make_model(networks.NModelSpec(0.95))


def law_dict(law):
    out = []
    for probs, choices in law.station_laws():
        out.append({c: p for c, p in zip(choices, probs)})
    return out


class TestProportionallyRandomized:
    def test_jobcount_proportions(self, cc_model):
        law = policies.ProportionallyRandomized().action_law(cc_model, (2, 1, 3))
        st = law_dict(law)
        assert st[0] == pytest.approx({0: 0.4, 2: 0.6, IDLE: 0.0})
        assert st[1] == pytest.approx({1: 1.0, IDLE: 0.0})

    def test_empty_system_idles(self, cc_model):
        law = policies.ProportionallyRandomized().action_law(cc_model, (0, 0, 0))
        st = law_dict(law)
        assert st[0][IDLE] == 1.0 and st[1][IDLE] == 1.0

    def test_idle_mass_zero_when_busy(self, cc_model):
        law = policies.ProportionallyRandomized().action_law(cc_model, (1, 0, 0))
        st = law_dict(law)
        assert st[0] == pytest.approx({0: 1.0, 2: 0.0, IDLE: 0.0})


class TestStaticPriority:
    def test_lbfs_prefers_highest_index(self, cc_model):
        law = policies.lbfs(3).action_law(cc_model, (1, 0, 1))
        st = law_dict(law)
        assert st[0][2] == 1.0
        assert st[1][IDLE] == 1.0

    def test_custom_ranking(self, cc_model):
        law = policies.StaticPriority((0, 1, 2)).action_law(cc_model, (1, 0, 1))
        assert law_dict(law)[0][0] == 1.0

    def test_ranking_must_be_permutation(self):
        with pytest.raises(ValueError):
            policies.StaticPriority((0, 0, 2))


class TestThreshold:
    def test_switches_at_threshold(self, nm_model):
        pol = policies.Threshold(11)
        below = law_dict(pol.action_law(nm_model, (11, 4)))
        above = law_dict(pol.action_law(nm_model, (12, 4)))
        assert below[1] == pytest.approx({0: 0.0, 1: 1.0})
        assert above[1] == pytest.approx({0: 1.0, 1: 0.0})


class TestUniform:
    def test_uniform_over_feasible(self, cc_model):
        law = policies.UniformRandom().action_law(cc_model, (1, 0, 1))
        st = law_dict(law)
        assert st[0] == pytest.approx({0: 1 / 3, 2: 1 / 3, IDLE: 1 / 3})
        assert st[1] == pytest.approx({1: 0.0, IDLE: 1.0})


class TestSampling:
    def test_point_mass_always_chosen(self, cc_model):
        law = policies.lbfs(3).action_law(cc_model, (1, 1, 1))
        stream = stream_for(0)
        pos = stream.pos
        for _ in range(10):
            assert policies.sample_action(law, stream) == (2, 1)
        assert stream.pos == pos  # point masses consume no uniforms

    def test_empirical_frequency(self, cc_model):
        law = policies.ProportionallyRandomized().action_law(cc_model, (2, 1, 3))
        stream = stream_for(11)
        n = 200_000
        hits = sum(policies.sample_action(law, stream)[0] == 0 for _ in range(n))
        freq = hits / n
        se = np.sqrt(0.4 * 0.6 / n)
        assert abs(freq - 0.4) < 4 * se

    def test_empty_system_samples_idle(self, cc_model):
        law = policies.ProportionallyRandomized().action_law(cc_model, (0, 0, 0))
        assert policies.sample_action(law, stream_for(1)) == (IDLE, IDLE)


class TestLogProb:
    def test_point_mass_is_zero(self, cc_model):
        pol = policies.lbfs(3)
        assert policies.log_prob(pol, cc_model, (1, 1, 1), (2, 1)) == 0.0

    def test_pr_example(self, cc_model):
        pol = policies.ProportionallyRandomized()
        lp = policies.log_prob(pol, cc_model, (2, 1, 3), (0, 1))
        assert lp == pytest.approx(np.log(0.4))

    def test_zero_probability_raises(self, cc_model):
        pol = policies.ProportionallyRandomized()
        with pytest.raises(ZeroProbabilityAction):
            policies.log_prob(pol, cc_model, (2, 1, 3), (IDLE, 1))

    def test_product_over_stations(self, nm_model):
        pol = policies.UniformRandom()
        lp = policies.log_prob(pol, nm_model, (3, 2), (0, 1))
        assert lp == pytest.approx(np.log(0.5))


class TestNeuralPolicy:
    def test_zero_params_give_uniform_groups(self, cc_model):
        params = nn.zero_params(nn.MlpArchitecture.policy(3, 2))
        law = policies.NeuralPolicy(params).action_law(cc_model, (1, 1, 1))
        st = law_dict(law)
        assert st[0] == pytest.approx({0: 1 / 3, 2: 1 / 3, IDLE: 1 / 3})
        assert st[1] == pytest.approx({1: 0.5, IDLE: 0.5})

    def test_empty_buffer_mass_folds_onto_idle(self, cc_model):
        params = nn.zero_params(nn.MlpArchitecture.policy(3, 2))
        law = policies.NeuralPolicy(params).action_law(cc_model, (0, 1, 1))
        st = law_dict(law)
        assert st[0][0] == 0.0
        assert st[0][IDLE] == pytest.approx(2 / 3)

    def test_logit_shift_invariance(self, cc_model):
        rng = np.random.default_rng(5)
        params = nn.xavier_init(nn.MlpArchitecture.policy(3, 2), rng)
        x = np.array([[2, 1, 1]])
        logits = nn.forward(params, x.astype(float))
        folded1, _ = policies.station_softmax(cc_model, logits, x)
        shifted = logits.copy()
        shifted[0, [0, 2, 3]] += 7.5  # station 0 group: classes 0, 2 and its idle logit
        folded2, _ = policies.station_softmax(cc_model, shifted, x)
        for a, b in zip(folded1, folded2):
            assert np.allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("state", [(2, 1, 1), (0, 3, 2), (1, 0, 0), (0, 0, 0)])
    def test_law_sums_and_feasibility(self, cc_model, state):
        rng = np.random.default_rng(9)
        params = nn.xavier_init(nn.MlpArchitecture.policy(3, 2), rng)
        law = policies.NeuralPolicy(params).action_law(cc_model, state)
        for probs, choices in law.station_laws():
            assert abs(probs.sum() - 1.0) < 1e-9
            for p, c in zip(probs, choices):
                if c != IDLE and state[c] == 0:
                    assert p == 0.0

    def test_nmodel_head_uses_class_logits_only(self, nm_model):
        params = nn.zero_params(nn.MlpArchitecture.policy(2, 2))
        law = policies.NeuralPolicy(params).action_law(nm_model, (0, 0))
        st = law_dict(law)
        assert st[0] == pytest.approx({0: 1.0})
        assert st[1] == pytest.approx({0: 0.5, 1: 0.5})


def _finite_diff_logp(model, params, state, action, eps=1e-6):
    """Central differences of log pi(a|x) w.r.t. every parameter."""
    grads = []
    for k in range(len(params.weights)):
        for arr_name in ("weights", "biases"):
            arr = getattr(params, arr_name)[k]
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + eps
                up = policies.log_prob(policies.NeuralPolicy(params), model, state, action)
                arr[idx] = old - eps
                dn = policies.log_prob(policies.NeuralPolicy(params), model, state, action)
                arr[idx] = old
                g[idx] = (up - dn) / (2 * eps)
                it.iternext()
            grads.append(g)
    return grads


class TestLogProbGradient:
    @pytest.mark.parametrize("state,action", [
        ((2, 1, 1), (0, 1)),
        ((2, 1, 1), (IDLE, IDLE)),
        ((0, 2, 1), (IDLE, 1)),   # idle slot carries folded empty-class mass
        ((0, 2, 1), (2, 1)),
    ])
    def test_matches_finite_differences(self, cc_model, state, action):
        rng = np.random.default_rng(17)
        arch = nn.MlpArchitecture((3, 6, 5, 4, 5))
        params = nn.xavier_init(arch, rng)
        x = np.array([state])
        out, cache = nn.forward_with_cache(params, x.astype(float))
        folded, raw = policies.station_softmax(cc_model, out, x)
        gl = policies.logit_grad_log_prob(cc_model, raw, folded, x,
                                          np.array([action]))
        analytic = nn.backward(params, x.astype(float), gl, cache=cache)
        numeric = _finite_diff_logp(cc_model, params, state, action)
        flat_a = np.concatenate([np.ravel(g) for pair in analytic for g in pair])
        flat_n = np.concatenate([np.ravel(g) for g in numeric])
        denom = np.maximum(np.abs(flat_n), 1e-6)
        assert np.max(np.abs(flat_a - flat_n) / denom) < 1e-5


class TestCloning:
    def test_memorizes_single_state(self, cc_model):
        teacher = policies.lbfs(3)
        states = np.tile([2, 1, 1], (64, 1))
        params, kl = policies.clone_from_teacher(
            cc_model, teacher, states, max_epochs=400, kl_target=1e-4,
            learning_rate=3e-3, seed=1,
        )
        law = policies.NeuralPolicy(params).action_law(cc_model, (2, 1, 1))
        st = law_dict(law)
        assert st[0][2] >= 0.99
        assert st[1][1] >= 0.99

    def test_empty_dataset_raises(self, cc_model):
        with pytest.raises(InsufficientData):
            policies.clone_from_teacher(cc_model, policies.lbfs(3),
                                        np.zeros((0, 3), dtype=int))


class TestBatchLaws:
    @pytest.mark.parametrize("factory", [
        lambda: policies.ProportionallyRandomized(),
        lambda: policies.lbfs(3),
        lambda: policies.UniformRandom(),
    ])
    def test_matches_per_state_laws(self, cc_model, factory):
        pol = factory()
        rng = np.random.default_rng(3)
        states = rng.integers(0, 5, size=(40, 3))
        batched = policies.batch_action_laws(cc_model, pol, states)
        for i, x in enumerate(states):
            law = pol.action_law(cc_model, x)
            for ell, (probs, _) in enumerate(law.station_laws()):
                assert np.allclose(batched[ell][i], probs, atol=1e-14)

    def test_threshold_batch(self, nm_model):
        pol = policies.Threshold(4)
        states = np.array([[3, 0], [5, 2], [4, 9]])
        batched = policies.batch_action_laws(nm_model, pol, states)
        assert np.allclose(batched[1], [[0, 1], [1, 0], [0, 1]])

    def test_neural_batch(self, cc_model):
        params = nn.xavier_init(nn.MlpArchitecture.policy(3, 2),
                                np.random.default_rng(0))
        pol = policies.NeuralPolicy(params)
        states = np.array([[1, 1, 1], [0, 2, 0], [3, 0, 1]])
        batched = policies.batch_action_laws(cc_model, pol, states)
        for i, x in enumerate(states):
            law = pol.action_law(cc_model, x)
            for ell, (probs, _) in enumerate(law.station_laws()):
                assert np.allclose(batched[ell][i], probs, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, cc_model):
        params = nn.xavier_init(nn.MlpArchitecture.policy(3, 2),
                                np.random.default_rng(2))
        path = tmp_path / "ckpt.json"
        policies.save_checkpoint(path, params, spec_fingerprint="abc123")
        loaded, meta = policies.load_checkpoint(path)
        assert meta["spec_fingerprint"] == "abc123"
        for w1, w2 in zip(params.weights, loaded.weights):
            assert np.array_equal(w1, w2)
