import numpy as np
import pytest

from safesim.diffusion import (DiffusionSchedule, TrainingCorpus, TrajectoryDenoiser,
                               add_noise, make_cosine_schedule, posterior_mean)
from safesim.dynamics import rollout
from safesim.scene import AgentState, build_context
from safesim.scenarios import straight_map


def _cosine_reference(K, beta_min=1e-4, beta_max=0.05, s=0.008):
    """Independent scalar recomputation of the schedule closed form."""
    import math

    abar = [math.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2 for k in range(K + 1)]
    abar = [a / abar[0] for a in abar]
    betas = []
    for k in range(1, K + 1):
        b = 1.0 - abar[k] / abar[k - 1]
        betas.append(min(max(b, beta_min), beta_max))
    betas[0] = beta_min
    out = []
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return betas, out


class TestCosineSchedule:
    def test_endpoints_k100(self):
        sched = make_cosine_schedule(100)
        assert sched.beta[0] == 0.0001
        assert sched.beta[-1] == 0.05

    def test_monotonic(self):
        for K in (10, 50, 100, 250):
            sched = make_cosine_schedule(K)
            assert np.all(np.diff(sched.beta) >= 0.0)
            assert np.all(np.diff(sched.alpha_bar) < 0.0)
            assert 1 - 0.0001 * K < sched.alpha_bar[0] < 1.0

    def test_matches_scalar_recomputation(self):
        sched = make_cosine_schedule(100)
        betas, abar = _cosine_reference(100)
        np.testing.assert_allclose(sched.beta, betas, rtol=0, atol=1e-14)
        np.testing.assert_allclose(sched.alpha_bar, abar, rtol=0, atol=1e-13)

    def test_near_total_corruption(self):
        # with betas capped at 0.05 the most corruption K=100 can reach is
        # abar_K = prod(1 - beta_k) ~ 0.045
        sched = make_cosine_schedule(100)
        assert sched.alpha_bar[-1] < 0.05

    def test_rejects_small_k(self):
        with pytest.raises(ValueError):
            make_cosine_schedule(1)

    def test_bounds_respected(self):
        sched = make_cosine_schedule(100)
        assert np.all(sched.beta >= 0.0001) and np.all(sched.beta <= 0.05)


class TestAddNoise:
    def test_zero_eps_scales(self):
        sched = make_cosine_schedule(100)
        tau = np.ones((4, 2))
        out = add_noise(tau, 30, np.zeros_like(tau), sched)
        np.testing.assert_allclose(out, np.sqrt(sched.abar(30)))

    def test_k0_identity_exact(self):
        sched = make_cosine_schedule(100)
        tau = np.random.default_rng(0).normal(size=(8, 2))
        out = add_noise(tau, 0, np.random.default_rng(1).normal(size=(8, 2)), sched)
        np.testing.assert_array_equal(out, tau)

    def test_monte_carlo_variance(self, rng):
        sched = make_cosine_schedule(100)
        for k in (10, 50, 100):
            eps = rng.standard_normal(100_000)
            out = add_noise(np.zeros(100_000), k, eps, sched)
            assert out.var() == pytest.approx(1 - sched.abar(k), rel=0.02)

    def test_iterated_kernel_matches_marginal(self, rng):
        # composing the per-step kernel x_k = sqrt(1-b_k) x_{k-1} + sqrt(b_k) e
        # must match the closed-form marginal in mean and variance
        sched = make_cosine_schedule(100)
        n = 100_000
        x0 = 1.7
        x = np.full(n, x0)
        for k in range(1, 11):
            b = sched.beta[k - 1]
            x = np.sqrt(1 - b) * x + np.sqrt(b) * rng.standard_normal(n)
        assert x.mean() == pytest.approx(np.sqrt(sched.abar(10)) * x0, rel=0.02)
        assert x.var() == pytest.approx(1 - sched.abar(10), rel=0.02)

    def test_rejects_bad_k(self):
        sched = make_cosine_schedule(100)
        with pytest.raises(ValueError):
            add_noise(np.zeros(2), 101, np.zeros(2), sched)


class TestPosteriorMean:
    def test_hand_evaluated_scalar_case(self):
        sched = DiffusionSchedule(K=2, beta=np.array([0.1, 0.05]),
                                  alpha=np.array([0.9, 0.95]),
                                  alpha_bar=np.array([0.9, 0.855]))
        mu = posterior_mean(np.array(2.0), np.array(1.0), 2, sched)
        # coefficients evaluated independently:
        # c0 = sqrt(0.9) * 0.05 / 0.145 = 0.32713...
        # ck = sqrt(0.95) * 0.1 / 0.145 = 0.67219...
        assert mu == pytest.approx(0.32713 * 1.0 + 0.67219 * 2.0, abs=1e-4)
        assert mu == pytest.approx(1.6715, abs=1e-4)

    def test_no_noise_step_is_identity_limit(self):
        eps = 1e-12
        sched = DiffusionSchedule(K=2, beta=np.array([0.1, eps]),
                                  alpha=np.array([0.9, 1 - eps]),
                                  alpha_bar=np.array([0.9, 0.9 * (1 - eps)]))
        mu = posterior_mean(np.array(2.0), np.array(1.0), 2, sched)
        assert mu == pytest.approx(2.0, abs=1e-9)

    def test_coefficient_sum_oracle(self):
        import math

        sched = make_cosine_schedule(100)
        for k in (1, 7, 42, 100):
            c = 1.234
            mu = posterior_mean(np.array(c), np.array(c), k, sched)
            abar_k = sched.abar(k)
            abar_p = sched.abar(k - 1)
            s_indep = (math.sqrt(abar_p) * sched.beta[k - 1]
                       + math.sqrt(1 - sched.beta[k - 1]) * (1 - abar_p)) / (1 - abar_k)
            assert float(mu) == pytest.approx(c * s_indep, abs=1e-12)

    def test_rejects_k0(self):
        sched = make_cosine_schedule(100)
        with pytest.raises(ValueError):
            posterior_mean(np.zeros(2), np.zeros(2), 0, sched)

    def test_posterior_variance_zero_at_k1(self):
        sched = make_cosine_schedule(100)
        assert sched.posterior_variance(1) == 0.0
        assert sched.posterior_variance(2) > 0.0


def _context_on_straight(v=6.0):
    m = straight_map()
    routes = [m.route_from_lanes(("l1",))]
    hist = np.array([[[0.0, 0.0, v, 0.0]]])
    return build_context("a0", hist, ["a0"], np.array([[4.6, 1.9]]), routes, 0)


class TestTraining:
    def test_overfit_single_trajectory(self):
        rng = np.random.default_rng(0)
        ctx = _context_on_straight()
        feats = ctx.feature_vector()[None]
        actions = np.stack([0.5 * np.sin(np.linspace(0, 3, 32)),
                            0.1 * np.cos(np.linspace(0, 3, 32))], axis=1)[None]
        corpus = TrainingCorpus(features=feats, actions=actions, dt=0.1)
        model = TrajectoryDenoiser(hidden_width=64, n_iterations=1500,
                                   batch_size=32, seed=0).fit(corpus)
        assert model.final_loss_ <= 1e-3

    def test_initial_loss_finite_positive(self, small_model):
        assert np.isfinite(small_model.loss_history_[0])
        assert small_model.loss_history_[0] > 0

    def test_loss_decreases_in_moving_average(self, small_corpus):
        corpus, _ = small_corpus
        model = TrajectoryDenoiser(hidden_width=64, n_iterations=5000, seed=1).fit(corpus)
        ma = np.convolve(model.loss_history_, np.ones(100) / 100, mode="valid")
        blocks = ma[::500]
        # noisy SGD: allow a small ripple on top of the monotone trend
        assert np.all(np.diff(blocks) <= 0.10 * blocks[:-1])
        assert blocks[-1] < 0.25 * blocks[0]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            TrainingCorpus(features=np.zeros((0, 3)), actions=np.zeros((0, 32, 2)), dt=0.1)


class TestSampling:
    def test_deterministic_given_seed(self, small_model):
        ctx = _context_on_straight()
        a, _ = small_model.sample(ctx, num_samples=3, rng=np.random.default_rng(42))
        b, _ = small_model.sample(ctx, num_samples=3, rng=np.random.default_rng(42))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.actions, tb.actions)
            np.testing.assert_array_equal(ta.states, tb.states)

    def test_default_num_samples_is_twenty(self, small_model):
        import inspect

        sig = inspect.signature(small_model.sample)
        assert sig.parameters["num_samples"].default == 20

    def test_zero_gradient_callback_matches_no_guidance(self, small_model):
        ctx = _context_on_straight()
        a, _ = small_model.sample(ctx, num_samples=2, rng=np.random.default_rng(7))
        b, _ = small_model.sample(ctx, guidance=lambda actions, k: actions,
                                  num_samples=2, rng=np.random.default_rng(7))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.actions, tb.actions)

    def test_output_satisfies_trajectory_invariant(self, small_model):
        ctx = _context_on_straight()
        trajs, _ = small_model.sample(ctx, num_samples=3, rng=np.random.default_rng(3))
        for t in trajs:
            assert t.check_consistent()

    def test_normalization_round_trip(self, small_model):
        acts = np.random.default_rng(5).normal(0, 2, (32, 2))
        back = small_model.denormalize_actions(small_model.normalize_actions(acts))
        np.testing.assert_allclose(back, acts, atol=1e-9)


class TestPartialSample:
    def _proposal(self, model):
        ctx = _context_on_straight()
        acts = np.zeros((model.horizon, 2))
        acts[:, 0] = 0.8
        return ctx, rollout(ctx.state, acts, model.dt)

    def test_gamma_zero_returns_proposal_bit_exact(self, small_model):
        ctx, prop = self._proposal(small_model)
        trajs, _ = small_model.partial_sample(ctx, prop, 0.0, num_samples=3,
                                              rng=np.random.default_rng(0))
        for t in trajs:
            np.testing.assert_array_equal(t.actions, prop.actions)
            np.testing.assert_array_equal(t.states, prop.states)

    def test_gamma_one_matches_sample_bit_exact(self, small_model):
        ctx, prop = self._proposal(small_model)
        a, _ = small_model.partial_sample(ctx, prop, 1.0, num_samples=3,
                                          rng=np.random.default_rng(9))
        b, _ = small_model.sample(ctx, num_samples=3, rng=np.random.default_rng(9))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.actions, tb.actions)

    def test_gamma_out_of_range_rejected(self, small_model):
        ctx, prop = self._proposal(small_model)
        with pytest.raises(ValueError):
            small_model.partial_sample(ctx, prop, 1.5)
        with pytest.raises(ValueError):
            small_model.partial_sample(ctx, prop, -0.1)

    def test_mse_grows_with_gamma(self, small_model):
        ctx, prop = self._proposal(small_model)

        def mean_mse(gamma, seeds):
            vals = []
            for s in seeds:
                trajs, _ = small_model.partial_sample(
                    ctx, prop, gamma, num_samples=1, rng=np.random.default_rng(s))
                vals.append(np.mean((trajs[0].actions - prop.actions) ** 2))
            return np.mean(vals)

        seeds = range(20)
        assert mean_mse(1.0, seeds) > mean_mse(0.2, seeds)


class TestPersistence:
    def test_save_load_round_trip(self, small_model, tmp_path):
        path = tmp_path / "model.npz"
        small_model.save(path)
        loaded = TrajectoryDenoiser.load(path)
        ctx = _context_on_straight()
        a, _ = small_model.sample(ctx, num_samples=2, rng=np.random.default_rng(1))
        b, _ = loaded.sample(ctx, num_samples=2, rng=np.random.default_rng(1))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.actions, tb.actions)

    def test_load_validates_shapes(self, small_model, tmp_path):
        path = tmp_path / "model.npz"
        small_model.save(path)
        data = dict(np.load(path, allow_pickle=False))
        data["w0"] = data["w0"][:, :-1]
        np.savez(tmp_path / "bad.npz", **data)
        with pytest.raises(ValueError):
            TrajectoryDenoiser.load(tmp_path / "bad.npz")
