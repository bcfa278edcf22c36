import numpy as np
import pytest

from qnctrl import estimators, networks, policies
from qnctrl.errors import NoRegenerationAfter, RegenerationNeverVisited
from qnctrl.estimators import EstimatorConfig
from qnctrl.mdp import TabularModel, make_model, policy_kernel
from qnctrl.rng import stream_for
from qnctrl.simulate import run_cycles, run_steps


def two_state_chain():
    kernel = {(0,): [((1,), 1.0)], (1,): [((0,), 1.0)]}
    return TabularModel(kernel, lambda x: float(x[0]), (0,))


def three_state_chain():
    """Aperiodic stochastic chain with regeneration state (0,) and cost x^2."""
    kernel = {
        (0,): [((1,), 0.6), ((0,), 0.4)],
        (1,): [((2,), 0.5), ((0,), 0.3), ((1,), 0.2)],
        (2,): [((0,), 0.7), ((2,), 0.3)],
    }
    return TabularModel(kernel, lambda x: float(x[0]) ** 2, (0,))


def dense_chain_oracle(model, states, gamma=None):
    """Stationary distribution, average cost, relative value and discounted pieces
    computed by dense linear algebra, independent of the estimator code."""
    n = len(states)
    index = {s: i for i, s in enumerate(states)}
    P = np.zeros((n, n))
    for s in states:
        for y, p in model.kernel(s, None):
            P[index[s], index[y]] += p
    g = np.array([model.cost(s) for s in states])
    evals, evecs = np.linalg.eig(P.T)
    k = np.argmin(np.abs(evals - 1))
    pi = np.real(evecs[:, k])
    pi = pi / pi.sum()
    avg = float(pi @ g)
    i0 = index[model.regeneration_state]
    A = np.eye(n) - P
    A[:, i0] = 1.0
    sol = np.linalg.solve(A, g - avg)
    h = sol.copy()
    h[i0] = 0.0
    out = {"P": P, "pi": pi, "avg": avg, "h": h, "index": index, "g": g}
    if gamma is not None:
        u = np.linalg.solve(np.eye(n) - gamma * P, g)
        r = (1 - gamma) * u[i0]
        V = u - r / (1 - gamma)
        out.update({"r": float(r), "V": V})
    return out


def fn_over(index, vec):
    return lambda s: float(vec[index[tuple(s)]])


def pzeta_fn(model, zeta):
    return estimators.make_kernel_expectation(model, policies.UniformRandom(), zeta)


class TestAvgCost:
    def test_toy_two_cycles(self):
        ep = run_cycles(two_state_chain(), policies.UniformRandom(), 2, stream_for(0))
        assert estimators.avg_cost([ep]) == 0.5

    def test_constant_cost(self):
        model = TabularModel({(0,): [((1,), 1.0)], (1,): [((0,), 1.0)]},
                             lambda x: 3.25, (0,))
        ep = run_cycles(model, policies.UniformRandom(), 5, stream_for(0))
        assert estimators.avg_cost([ep]) == 3.25

    def test_pooled_over_actors(self):
        model = three_state_chain()
        eps = [run_cycles(model, policies.UniformRandom(), 40, stream_for(s))
               for s in (1, 2, 3)]
        pooled = estimators.avg_cost(eps)
        total = sum(ep.costs.sum() for ep in eps)
        length = sum(ep.num_steps for ep in eps)
        assert pooled == pytest.approx(total / length, abs=1e-15)


class TestHStandard:
    def test_toy_value(self):
        ep = run_cycles(two_state_chain(), policies.UniformRandom(), 2, stream_for(0))
        assert estimators.h_standard(ep, 1, 0.5) == pytest.approx(0.5)

    def test_constant_cost_vanishes(self):
        model = TabularModel({(0,): [((1,), 1.0)], (1,): [((0,), 1.0)]},
                             lambda x: 2.0, (0,))
        ep = run_cycles(model, policies.UniformRandom(), 3, stream_for(0))
        for k in range(ep.num_steps):
            assert estimators.h_standard(ep, k, 2.0) == 0.0

    def test_no_regeneration_raises(self):
        ep = run_steps(three_state_chain(), policies.UniformRandom(), (2,), 3,
                       stream_for(5))
        if ep.sigma.size and ep.sigma[-1] > 0:
            k = int(ep.sigma[-1])
        else:
            k = 0
        if not np.any(ep.sigma > k):
            with pytest.raises(NoRegenerationAfter):
                estimators.h_standard(ep, k, 1.0)

    def test_estimates_h_at_regeneration_state_centers_on_zero(self):
        model = three_state_chain()
        oracle = dense_chain_oracle(model, [(0,), (1,), (2,)])
        ep = run_cycles(model, policies.UniformRandom(), 4000, stream_for(7))
        vals = [estimators.h_standard(ep, int(k), oracle["avg"])
                for k in ep.sigma[:-1]]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals)) < 4 * se + 1e-3


class TestAmpZeroVariance:
    def test_exact_solution_kills_every_summand(self):
        model = three_state_chain()
        states = [(0,), (1,), (2,)]
        oracle = dense_chain_oracle(model, states)
        zeta = fn_over(oracle["index"], oracle["h"])
        pz = pzeta_fn(model, zeta)
        ep = run_cycles(model, policies.UniformRandom(), 300, stream_for(3))
        for t in range(ep.num_steps):
            x = ep.state(t)
            resid = model.cost(x) - oracle["avg"] + pz(x) - zeta(x)
            assert abs(resid) < 1e-9
        for k in range(0, ep.num_steps, 7):
            est = estimators.h_amp(ep, k, oracle["avg"], zeta, pz)
            assert abs(est - zeta(ep.state(k))) < 1e-9

    def test_zero_zeta_reduces_to_standard(self):
        model = three_state_chain()
        ep = run_cycles(model, policies.UniformRandom(), 50, stream_for(4))
        zeta = lambda s: 0.0
        pz = lambda s: 0.0
        for k in range(ep.num_steps):
            assert estimators.h_amp(ep, k, 1.3, zeta, pz) == pytest.approx(
                estimators.h_standard(ep, k, 1.3), abs=1e-12
            )

    def test_hand_solved_two_state(self):
        """h for the deterministic 0-1 cycle: h(0) = -0.5, h(1) = +0.5 route."""
        model = two_state_chain()
        # Poisson: g - 0.5 + h(next) - h(x) = 0 with h(0) = 0 gives h(1) = 0.5
        zeta = lambda s: 0.5 * s[0]
        pz = lambda s: 0.5 * (1 - s[0])  # next state is the other one
        ep = run_cycles(model, policies.UniformRandom(), 10, stream_for(0))
        for k in range(ep.num_steps):
            est = estimators.h_amp(ep, k, 0.5, zeta, pz)
            assert est == pytest.approx(zeta(ep.state(k)), abs=1e-12)


class TestDiscountedEstimators:
    GAMMA = 0.9

    def _oracle(self, model):
        return dense_chain_oracle(model, [(0,), (1,), (2,)], gamma=self.GAMMA)

    def test_exact_inputs_zero_variance(self):
        model = three_state_chain()
        oracle = self._oracle(model)
        zeta = fn_over(oracle["index"], oracle["V"])
        pz = pzeta_fn(model, zeta)
        cfg = EstimatorConfig(gamma=self.GAMMA, lam=0.97)
        ep = run_steps(model, policies.UniformRandom(), (0,), 400, stream_for(9))
        for t in range(ep.num_steps):
            x = ep.state(t)
            resid = model.cost(x) - oracle["r"] + self.GAMMA * pz(x) - zeta(x)
            assert abs(resid) < 1e-9
        for k in range(0, 300, 11):
            est = estimators.v_amp(ep, k, cfg, oracle["r"], zeta, pz)
            assert abs(est - zeta(ep.state(k))) < 1e-9

    def test_gamma_lam_one_equals_h_standard(self):
        model = three_state_chain()
        ep = run_cycles(model, policies.UniformRandom(), 60, stream_for(2))
        cfg = EstimatorConfig(gamma=1.0, lam=1.0)
        avg = estimators.avg_cost([ep])
        zeta = lambda s: 0.0
        pz = lambda s: 0.0
        for k in range(ep.num_steps):
            assert estimators.v_amp(ep, k, cfg, avg, zeta, pz) == pytest.approx(
                estimators.h_standard(ep, k, avg), abs=1e-12
            )

    def test_lambda_one_gae_is_zeta_invariant(self):
        """The one-replication form telescopes pathwise for any zeta."""
        model = three_state_chain()
        ep = run_steps(model, policies.UniformRandom(), (0,), 200, stream_for(6))
        cfg = EstimatorConfig(gamma=self.GAMMA, lam=1.0)
        r_hat = 0.37
        z1 = lambda s: 0.0
        z2 = lambda s: np.sin(s[0]) * 2.7 if s[0] != 0 else 0.0
        for k in range(0, 150, 13):
            a = estimators.v_gae(ep, k, cfg, r_hat, z1)
            b = estimators.v_gae(ep, k, cfg, r_hat, z2)
            assert a == pytest.approx(b, abs=1e-10)

    def test_lambda_one_amp_is_zeta_invariant_on_deterministic_chain(self):
        model = two_state_chain()
        ep = run_steps(model, policies.UniformRandom(), (0,), 100, stream_for(1))
        cfg = EstimatorConfig(gamma=self.GAMMA, lam=1.0)
        z1 = lambda s: 0.0
        z2 = lambda s: 1.9 * s[0]
        pz1 = lambda s: 0.0
        pz2 = lambda s: 1.9 * (1 - s[0])
        for k in range(0, 90, 7):
            a = estimators.v_amp(ep, k, cfg, 0.4, z1, pz1)
            b = estimators.v_amp(ep, k, cfg, 0.4, z2, pz2)
            assert a == pytest.approx(b, abs=1e-10)

    def test_gae_equals_amp_on_deterministic_kernel(self):
        model = two_state_chain()
        ep = run_steps(model, policies.UniformRandom(), (0,), 120, stream_for(8))
        cfg = EstimatorConfig(gamma=0.95, lam=0.9)
        zeta = lambda s: 0.8 * s[0]
        pz = lambda s: 0.8 * (1 - s[0])  # deterministic next state
        for k in range(0, 100, 9):
            assert estimators.v_gae(ep, k, cfg, 0.2, zeta) == pytest.approx(
                estimators.v_amp(ep, k, cfg, 0.2, zeta, pz), abs=1e-12
            )

    def test_gae_and_amp_share_expectation(self):
        model = three_state_chain()
        oracle = self._oracle(model)
        zeta = fn_over(oracle["index"], oracle["V"] * 0.7)  # deliberately inexact
        pz = pzeta_fn(model, zeta)
        cfg = EstimatorConfig(gamma=self.GAMMA, lam=0.9)
        amps, gaes = [], []
        for rep in range(3000):
            ep = run_steps(model, policies.UniformRandom(), (1,), 40,
                           stream_for(rep, actor=5))
            amps.append(estimators.v_amp(ep, 0, cfg, oracle["r"], zeta, pz))
            gaes.append(estimators.v_gae(ep, 0, cfg, oracle["r"], zeta))
        amps, gaes = np.array(amps), np.array(gaes)
        diff = amps.mean() - gaes.mean()
        se = np.sqrt(amps.var(ddof=1) / len(amps) + gaes.var(ddof=1) / len(gaes))
        assert abs(diff) < 3.5 * se
        # the martingale correction also reduces variance here
        assert amps.var(ddof=1) <= gaes.var(ddof=1)

    def test_v_infinite_matches_v_amp_without_visits(self):
        model = three_state_chain()
        ep = run_steps(model, policies.UniformRandom(), (1,), 30, stream_for(12))
        first_visit = int(ep.sigma[0]) if ep.sigma.size else ep.num_steps
        cfg = EstimatorConfig(gamma=0.9, lam=0.95)
        zeta = lambda s: 0.3 * s[0]
        pz = pzeta_fn(model, zeta)
        if first_visit > 2:
            for k in range(first_visit - 1):
                a = estimators.v_amp(ep, k, cfg, 0.7, zeta, pz)
                b = estimators.v_infinite(ep, k, cfg, 0.7, zeta, pz)
                if ep.sigma.size == 0:
                    assert a == pytest.approx(b, abs=1e-12)

    def test_v_infinite_constant_cost(self):
        model = TabularModel({(0,): [((1,), 1.0)], (1,): [((0,), 1.0)]},
                             lambda x: 4.0, (0,))
        ep = run_steps(model, policies.UniformRandom(), (0,), 50, stream_for(0))
        cfg = EstimatorConfig(gamma=0.9, lam=0.9)
        zeta = lambda s: 1.5 * s[0]
        pz = lambda s: 1.5 * (1 - s[0])
        est = estimators.v_infinite(ep, 3, cfg, 4.0, zeta, pz)
        # constant cost at the exact center leaves only the control variate,
        # whose martingale sum is not zero pathwise; just check finiteness here
        assert np.isfinite(est)

    def test_unbiasedness_of_martingale_correction(self):
        model = three_state_chain()
        cfg = EstimatorConfig(gamma=0.92, lam=1.0)
        zeta = lambda s: (0.0, 2.0, -1.0)[s[0]]
        pz = pzeta_fn(model, zeta)
        amp0, amp1 = [], []
        for rep in range(4000):
            ep = run_steps(model, policies.UniformRandom(), (1,), 30,
                           stream_for(rep, actor=6))
            amp1.append(estimators.v_amp(ep, 0, cfg, 0.5, zeta, pz))
            amp0.append(estimators.v_amp(ep, 0, cfg, 0.5,
                                         lambda s: 0.0, lambda s: 0.0))
        amp0, amp1 = np.array(amp0), np.array(amp1)
        diff = amp0.mean() - amp1.mean()
        se = np.sqrt(amp0.var(ddof=1) / len(amp0) + amp1.var(ddof=1) / len(amp1))
        assert abs(diff) < 3.5 * se


class TestRStar:
    def test_constant_cost_geometric_sum(self):
        c, gamma, L = 2.0, 0.9, 25
        model = TabularModel({(0,): [((1,), 1.0)], (1,): [((0,), 1.0)]},
                             lambda x: c, (0,))
        ep = run_steps(model, policies.UniformRandom(), (0,), 200, stream_for(0))
        full = [v for v in ep.sigma if v + L <= ep.num_steps - 1]
        est = estimators.r_star([ep], gamma, L)
        expected = c * (1 - gamma ** (L + 1))
        if len(full) == len(ep.sigma):
            assert est == pytest.approx(expected, abs=1e-12)

    def test_never_visited_raises(self):
        model = three_state_chain()
        ep = run_steps(model, policies.UniformRandom(), (2,), 2, stream_for(20))
        if ep.sigma.size == 0:
            with pytest.raises(RegenerationNeverVisited):
                estimators.r_star([ep], 0.9, 5)

    def test_exact_center_approaches_average_as_gamma_rises(self):
        """Exact r(gamma) from the dense oracle approaches the average cost."""
        model = three_state_chain()
        gaps = []
        for gamma in (0.9, 0.99, 0.999):
            oracle = dense_chain_oracle(model, [(0,), (1,), (2,)], gamma=gamma)
            gaps.append(abs(oracle["r"] - oracle["avg"]))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-2

    def test_estimator_tracks_exact_value(self):
        model = three_state_chain()
        gamma = 0.95
        oracle = dense_chain_oracle(model, [(0,), (1,), (2,)], gamma=gamma)
        eps = [run_steps(model, policies.UniformRandom(), (0,), 4000,
                         stream_for(s, actor=9)) for s in range(8)]
        est = estimators.r_star(eps, gamma)
        assert est == pytest.approx(oracle["r"], abs=0.02)


class TestAdvantage:
    def test_zero_value_fn(self):
        model = make_model(networks.criss_cross("il"))
        a = estimators.advantage(model, lambda s: 0.0, (2, 1, 0), (0, 1), 1.2)
        assert a == pytest.approx(model.cost((2, 1, 0)) - 1.2)

    def test_hand_kernel_arithmetic(self):
        model = three_state_chain()
        v = {(0,): 0.0, (1,): 2.0, (2,): 5.0}
        a = estimators.advantage(model, lambda s: v[tuple(s)], (1,), (0,), 0.9)
        expected = 1.0 - 0.9 + (0.5 * 5.0 + 0.3 * 0.0 + 0.2 * 2.0) - 2.0
        assert a == pytest.approx(expected, abs=1e-12)

    def test_poisson_zero_mean_under_policy(self):
        model = three_state_chain()
        oracle = dense_chain_oracle(model, [(0,), (1,), (2,)])
        vfn = fn_over(oracle["index"], oracle["h"])
        for s in [(0,), (1,), (2,)]:
            m = estimators.mean_advantage_under_policy(
                model, policies.UniformRandom(), vfn, s, oracle["avg"]
            )
            assert abs(m) < 1e-9

    def test_discounted_poisson_zero_mean(self):
        model = three_state_chain()
        gamma = 0.9
        oracle = dense_chain_oracle(model, [(0,), (1,), (2,)], gamma=gamma)
        vfn = fn_over(oracle["index"], oracle["V"])
        for s in [(0,), (1,), (2,)]:
            m = estimators.mean_advantage_under_policy(
                model, policies.UniformRandom(), vfn, s, oracle["r"], gamma=gamma
            )
            assert abs(m) < 1e-9


class TestBatchPaths:
    """The vectorized training path must agree with the per-step references."""

    def _zeta(self):
        table = {(0,): 0.0, (1,): 1.7, (2,): -0.9}
        zfn = lambda s: table[tuple(s)]
        zbatch = lambda arr: np.array([table[tuple(r)] for r in np.atleast_2d(arr)])
        return zfn, zbatch

    def test_standard_targets(self):
        model = three_state_chain()
        ep = run_cycles(model, policies.UniformRandom(), 30, stream_for(1))
        cfg = EstimatorConfig(gamma=1.0, lam=1.0, variant="standard")
        vt = estimators.batch_targets([ep], cfg, avg=0.8, r_hat=None)
        ref = [estimators.h_standard(ep, k, 0.8) for k in range(ep.num_steps)]
        assert np.allclose(vt.per_episode[0], ref, atol=1e-10)

    def test_amp_targets(self):
        model = three_state_chain()
        pol = policies.UniformRandom()
        ep = run_cycles(model, pol, 30, stream_for(2))
        zfn, zbatch = self._zeta()
        pz = estimators.make_kernel_expectation(model, pol, zfn)
        cfg = EstimatorConfig(gamma=1.0, lam=1.0, variant="amp")
        vt = estimators.batch_targets([ep], cfg, avg=0.8, r_hat=None,
                                      zeta_batch=zbatch, model=model, policy=pol)
        ref = [estimators.h_amp(ep, k, 0.8, zfn, pz) for k in range(ep.num_steps)]
        assert np.allclose(vt.per_episode[0], ref, atol=1e-10)

    def test_discounted_amp_targets_with_tail(self):
        model = three_state_chain()
        pol = policies.UniformRandom()
        ep = run_steps(model, pol, (0,), 120, stream_for(3))
        zfn, zbatch = self._zeta()
        pz = estimators.make_kernel_expectation(model, pol, zfn)
        cfg = EstimatorConfig(gamma=0.93, lam=0.9, variant="amp")
        vt = estimators.batch_targets([ep], cfg, avg=0.5, r_hat=0.61,
                                      zeta_batch=zbatch, model=model, policy=pol,
                                      num_data=90)
        assert vt.per_episode[0].shape == (90,)
        ref = [estimators.v_amp(ep, k, cfg, 0.61, zfn, pz) for k in range(90)]
        assert np.allclose(vt.per_episode[0], ref, atol=1e-10)

    def test_gae_targets(self):
        model = three_state_chain()
        pol = policies.UniformRandom()
        ep = run_steps(model, pol, (0,), 100, stream_for(4))
        zfn, zbatch = self._zeta()
        cfg = EstimatorConfig(gamma=0.93, lam=0.9, variant="gae")
        vt = estimators.batch_targets([ep], cfg, avg=0.5, r_hat=0.61,
                                      zeta_batch=zbatch, model=model, policy=pol,
                                      num_data=80)
        ref = [estimators.v_gae(ep, k, cfg, 0.61, zfn) for k in range(80)]
        assert np.allclose(vt.per_episode[0], ref, atol=1e-10)

    def test_infinite_targets(self):
        model = three_state_chain()
        pol = policies.UniformRandom()
        ep = run_steps(model, pol, (0,), 100, stream_for(5))
        zfn, zbatch = self._zeta()
        pz = estimators.make_kernel_expectation(model, pol, zfn)
        cfg = EstimatorConfig(gamma=0.93, lam=0.9, variant="amp",
                              value_target="infinite")
        vt = estimators.batch_targets([ep], cfg, avg=0.5, r_hat=None,
                                      zeta_batch=zbatch, model=model, policy=pol,
                                      num_data=80)
        ref = [estimators.v_infinite(ep, k, cfg, 0.5, zfn, pz) for k in range(80)]
        assert np.allclose(vt.per_episode[0], ref, atol=1e-10)

    def test_batch_kernel_expectation_matches_pointwise(self):
        model = make_model(networks.criss_cross("im"))
        pol = policies.ProportionallyRandomized()
        zeta = lambda s: float(np.sum(np.asarray(s) ** 2))
        zbatch = lambda arr: (np.atleast_2d(arr).astype(float) ** 2).sum(axis=1)
        pz = estimators.make_kernel_expectation(model, pol, zeta)
        rng = np.random.default_rng(0)
        states = rng.integers(0, 4, size=(25, 3))
        batched = estimators.batch_kernel_expectation(model, pol, states, zbatch)
        for i, s in enumerate(states):
            assert batched[i] == pytest.approx(pz(tuple(s)), abs=1e-12)

    def test_batch_advantages_match_pointwise(self):
        from qnctrl import nn

        model = make_model(networks.criss_cross("im"))
        pol = policies.ProportionallyRandomized()
        ep = run_cycles(model, pol, 40, stream_for(6))
        params = nn.xavier_init(nn.MlpArchitecture.value(3), np.random.default_rng(1))
        vfn = lambda s: float(nn.forward(params, np.asarray(s, dtype=float))[0])
        advs = estimators.batch_advantages(model, params, [ep], 0.9, gamma=0.97)
        for k in range(ep.num_steps):
            ref = estimators.advantage(model, vfn, ep.state(k),
                                       tuple(ep.actions[k]), 0.9, gamma=0.97)
            assert advs[0][k] == pytest.approx(ref, abs=1e-9)
