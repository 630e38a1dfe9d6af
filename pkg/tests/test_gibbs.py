import numpy as np
import pytest
from scipy import stats

from ddfactor.gibbs import (ChainError, _draw_zero, _mh_positive,
                            acceptance_rate_above, conditional_mean_var,
                            laplace_params, log_conditional,
                            precision_from_factors, run_chain,
                            sample_sigma_conditional, tv_bound, update_factors,
                            update_Q_positive, update_Q_zero, update_sigma,
                            update_T, y_conditional)
from ddfactor.model import (CountTable, DegenerateColumnError, FactorState,
                            Hyperparams, LatentState, sample_prior_factors,
                            simulate_design)

import oracles

# tv_bound(1), frozen after agreement of two independent integration rules
TV_BOUND_1 = 0.2052369794346955


def _state_for_rate(rate, J=1):
    # one OTU with sigma * Q^2 = rate in every column
    return LatentState(np.array([0.5]), np.full((1, J), np.sqrt(rate / 0.5)), np.ones(J))


class TestUpdateT:
    def test_gamma_mean(self, rng):
        st = _state_for_rate(2.0)
        draws = np.array([update_T(st, np.array([[5]]), rng)[0] for _ in range(20000)])
        assert abs(draws.mean() - 2.5) < 4 * np.sqrt(5 / 4 / draws.size)

    def test_vectorized_mean(self, rng):
        st = LatentState(np.full(1, 0.5), np.full((1, 10**5), 2.0), np.ones(10**5))
        T = update_T(st, np.full((1, 10**5), 5), rng)
        assert T.mean() == pytest.approx(2.5, abs=4 * np.sqrt(1.25 / 10**5))

    def test_exponential_law(self, rng):
        st = LatentState(np.full(1, 0.5), np.full((1, 5000), np.sqrt(2.0)), np.ones(5000))
        T = update_T(st, np.ones((1, 5000), dtype=int), rng)
        assert stats.kstest(T, "expon").pvalue > 0.001

    def test_columns_independent(self, rng):
        q = np.array([[1.0, 3.0]])
        st = LatentState(np.array([1.0]), q, np.ones(2))
        st_sw = LatentState(np.array([1.0]), q[:, ::-1].copy(), np.ones(2))
        a = np.array([update_T(st, np.array([[2, 7]]), rng) for _ in range(4000)])
        b = np.array([update_T(st_sw, np.array([[7, 2]]), rng) for _ in range(4000)])
        assert stats.ks_2samp(a[:, 0], b[:, 1]).pvalue > 0.001
        assert stats.ks_2samp(a[:, 1], b[:, 0]).pvalue > 0.001

    def test_degenerate(self, rng):
        st = LatentState(np.array([0.5, 0.5]), np.array([[1.0, -1.0], [1.0, -2.0]]), np.ones(2))
        with pytest.raises(DegenerateColumnError):
            update_T(st, np.array([[1, 0], [1, 0]]), rng)


class TestConditionalMeanVar:
    def test_bivariate(self):
        rho, q = 0.6, 1.7
        mu, s2 = conditional_mean_var([[1, rho], [rho, 1]], [q], 0)
        assert mu == pytest.approx(rho * q, abs=1e-14)
        assert s2 == pytest.approx(1 - rho**2, abs=1e-14)

    def test_independent(self):
        assert conditional_mean_var(np.eye(2), [5.0], 1) == pytest.approx((0.0, 1.0))

    @pytest.mark.parametrize("j", [0, 1, 2])
    def test_against_schur(self, rng, j):
        A = rng.standard_normal((3, 5))
        Sigma = A @ A.T + 0.1 * np.eye(3)
        q = rng.standard_normal(2)
        mu, s2 = conditional_mean_var(Sigma, q, j)
        mu0, s20 = oracles.brute_conditional(Sigma, q, j)
        assert abs(mu - mu0) < 1e-10 and abs(s2 - s20) < 1e-10

    def test_not_pd(self):
        with pytest.raises(np.linalg.LinAlgError):
            conditional_mean_var([[1, 2], [2, 1]], [0.0], 0)

    def test_woodbury_precision(self, rng):
        Y = rng.standard_normal((3, 6))
        tau = 2.5
        direct = np.linalg.inv(Y.T @ Y + np.eye(6) / tau)
        np.testing.assert_allclose(precision_from_factors(Y, tau), direct, atol=1e-10)


class TestZeroCount:
    def test_symmetric_case(self, rng):
        u = rng.random((2, 200000))
        x = _draw_zero(np.zeros(200000), 2.0, 0.0, u[0], u[1])
        assert (x < 0).mean() == pytest.approx(0.5, abs=4 * np.sqrt(0.25 / x.size))
        assert stats.kstest(x, "norm", args=(0, np.sqrt(2.0))).pvalue > 0.001

    def test_histogram_matches_quadrature(self, rng):
        mu, s2, sT = 0.3, 1.0, 0.5
        N = 10**6
        u = rng.random((2, N))
        x = _draw_zero(np.full(N, mu), s2, sT, u[0], u[1])
        edges = np.linspace(-3.5, 3.0, 27)
        cdf = oracles.q_cdf(edges, 0, mu, s2, sT)
        expected = N * np.concatenate([[cdf[0]], np.diff(cdf), [1 - cdf[-1]]])
        observed = np.histogram(x, np.concatenate([[-np.inf], edges, [np.inf]]))[0]
        assert stats.chisquare(observed, expected).pvalue > 0.001

    @pytest.mark.parametrize("mu,s2,sT", [(0.3, 1.0, 0.5), (-1.0, 0.3, 4.0), (2.0, 2.0, 0.1)])
    def test_sign_frequency(self, rng, mu, s2, sT):
        _, p1 = oracles.q_normalized(0, mu, s2, sT)
        N = 200000
        u = rng.random((2, N))
        neg = (_draw_zero(np.full(N, mu), s2, sT, u[0], u[1]) <= 0).mean()
        assert abs(neg - p1) < 3 * np.sqrt(p1 * (1 - p1) / N)

    def test_scalar_wrapper(self, rng):
        assert np.isfinite(update_Q_zero(0.0, 1.0, 0.5, 1.0, rng))


class TestLaplace:
    def test_worked_example(self):
        mu_hat, s2_hat = laplace_params(2, 0.0, 1.0, 1.0, 1.0)
        assert mu_hat == pytest.approx(2 / np.sqrt(3), abs=1e-12)
        assert s2_hat == pytest.approx(1 / 6, abs=1e-12)
        x, v = oracles.laplace_numeric(2, 0.0, 1.0, 1.0)
        assert abs(x - mu_hat) < 1e-6 and abs(v - s2_hat) < 1e-5

    def test_stationary_point(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 200))
            mu, s2, sT = rng.normal(0, 3), rng.uniform(0.05, 5), rng.uniform(0.01, 5)
            x, _ = laplace_params(n, mu, s2, sT, 1.0)
            assert x > 0
            grad = 2 * n / x - 2 * sT * x - (x - mu) / s2
            assert abs(grad) < 1e-8 * max(1.0, 2 * n / x)

    def test_large_n_asymptotics(self):
        n, mu, s2, sT = 10**4, 0.7, 2.0, 0.3
        x, v = laplace_params(n, mu, s2, sT, 1.0)
        assert x / np.sqrt(n / (sT + 1 / (2 * s2))) == pytest.approx(1.0, abs=0.01)
        # the curvature term 2n/mu_hat^2 tends to A = 2 sT + 1/s2, so
        # s2_hat = 1/(2n/mu_hat^2 + A) ~ mu_hat^2/(4n), consistent with 1/6 above
        assert v / (x**2 / (4 * n)) == pytest.approx(1.0, abs=0.01)

    def test_vectorized(self):
        x, v = laplace_params(np.array([1, 5]), np.array([0.0, -3.0]), 1.0, 1.0, 2.0)
        assert x.shape == (2,) and np.all(x > 0) and np.all(v > 0)


def _target_draws(n, mu, s2, sT, size, rng):
    grid = np.linspace(1e-6, 12.0, 6001)
    cdf = oracles.q_cdf(grid, n, mu, s2, sT)
    cdf = np.maximum.accumulate(cdf / cdf[-1])
    return np.interp(rng.random(size), cdf, grid), (grid, cdf)


class TestPositiveMH:
    def test_stationarity(self, rng):
        n, mu, s2, sT = 3, 0.3, 1.0, 0.5
        chains = 20000
        q, (grid, cdf) = _target_draws(n, mu, s2, sT, chains, rng)
        for _ in range(5):  # 10^5 transitions in total
            q, _ = _mh_positive(q, n, mu, s2, sT, rng.standard_normal(chains), rng.random(chains))
        ks = stats.kstest(q, lambda x: np.interp(x, grid, cdf))
        assert ks.pvalue > 0.001

    def test_acceptance_at_n50(self, rng):
        n, mu, s2, sT = 50, 0.3, 1.0, 0.5
        q, _ = _target_draws(n, mu, s2, sT, 50000, rng)
        _, acc = _mh_positive(q, n, mu, s2, sT, rng.standard_normal(q.size), rng.random(q.size))
        assert acc.mean() > 0.95

    def test_acceptance_above_tv_floor(self, rng):
        # flat normal term: the target is q^{2k} exp(-q^2)
        k, mu, s2, sT = 10, 0.0, 1e8, 1.0
        q, _ = _target_draws(k, mu, s2, sT, 50000, rng)
        _, acc = _mh_positive(q, k, mu, s2, sT, rng.standard_normal(q.size), rng.random(q.size))
        assert acc.mean() >= 1 - 2 * tv_bound(k)

    def test_stays_positive(self, rng):
        q = 0.5
        for _ in range(2000):
            q, _ = update_Q_positive(q, 1, -4.0, 0.2, 0.1, 3.0, rng)
            assert q > 0

    def test_log_conditional_matches_oracle(self):
        for q in (0.3, 1.2, 4.0):
            assert log_conditional(q, 4, 0.2, 1.5, 0.7) == pytest.approx(
                oracles.q_log_density(q, 4, 0.2, 1.5, 0.7), rel=1e-13)


class TestSigma:
    def test_no_tilt_is_beta(self, rng):
        x = sample_sigma_conditional(np.full(20000, 3.1), 0.4, 0.0, rng)
        assert stats.kstest(x, "beta", args=(3.1, 0.4)).pvalue > 0.001

    def test_scalar_update(self, rng):
        h = Hyperparams(alpha=2.0)
        x = [update_sigma(0, 3, 0.0, h, rng, n_otus=20) for _ in range(3000)]
        assert stats.kstest(x, "beta", args=(3.1, 0.4)).pvalue > 0.001

    @staticmethod
    def _chi2(a, b, c, N, rng, edges):
        cdf = oracles.sigma_cdf_grid(a, b, c, np.concatenate([[0.0], edges, [1.0]]))
        expected = N * np.diff(cdf)
        x = np.concatenate([sample_sigma_conditional(np.full(N // 5, a), b, c, rng)
                            for _ in range(5)])
        observed = np.histogram(x, np.concatenate([[0.0], edges, [1.0]]))[0]
        keep = expected > 5
        obs = np.append(observed[keep], observed[~keep].sum())
        exp = np.append(expected[keep], expected[~keep].sum())
        if exp[-1] == 0:
            obs, exp = obs[:-1], exp[:-1]
        return stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue

    def test_histogram_c10(self, rng):
        # n_i = 3, alpha/I = 0.1
        edges = np.linspace(0.02, 0.98, 40)
        assert self._chi2(3.1, 0.4, 10.0, 10**6, rng, edges) > 0.001

    @pytest.mark.parametrize("a,b,c", [(3.1, 0.4, 60.0), (0.05, 0.45, 500.0),
                                       (400.0, 0.45, 100.0), (1.2, 0.3, 5000.0)])
    def test_histogram_large_c(self, rng, a, b, c):
        mean = a / (a + c) if a - 1 < c else 0.9
        sd = np.sqrt(a) / c if a - 1 < c else 0.1
        lo, hi = max(mean - 4 * sd, 1e-6), min(mean + 4 * sd, 1 - 1e-6)
        edges = np.linspace(lo, hi, 30)
        assert self._chi2(a, b, c, 200000, rng, edges) > 0.001

    @pytest.mark.parametrize("c", [1.0, 10.0, 16.0, 50.0, 100.0])
    def test_acceptance_rate(self, rng, c):
        st = {}
        sample_sigma_conditional(np.full(20000, 3.1), 0.4, c, rng, stats=st)
        assert 20000 / st["proposals"] >= 0.5

    def test_tiny_shape_no_floor_pileup(self, rng):
        x = sample_sigma_conditional(np.full(20000, 0.01), 0.45, 3.0, rng)
        assert (x <= 1e-300).mean() < 0.01


def _prior_factor_draws(J, hyper, rng, N):
    return [sample_prior_factors(J, hyper, rng, n_otus=0) for _ in range(N)]


class TestUpdateFactors:
    def test_y_conditional_m1(self, rng):
        I, J = 6, 4
        X = rng.standard_normal((1, I))
        Q = rng.standard_normal((I, J))
        gamma = np.array([1.7])
        gl = rng.gamma(2.0, 1.0, (1, J))
        tau = 0.8
        mean, prec = y_conditional(Q, X, gamma, gl, tau)
        for j in range(J):
            p = gamma[0] * gl[0, j] + tau * np.sum(X[0] ** 2)
            m = tau * np.sum(X[0] * Q[:, j]) / p
            assert abs(prec[j, 0, 0] - p) < 1e-10
            assert abs(mean[j, 0] - m) < 1e-10

    def test_no_rows_keeps_prior(self, rng):
        h = Hyperparams(m=2, a1=2.0, a2=3.0, v=3.0)
        J, N = 3, 3000
        before = _prior_factor_draws(J, h, rng, N)
        after = [update_factors(np.zeros((0, J)), fs, h, rng) for fs in before]
        fresh = _prior_factor_draws(J, h, rng, N)
        feats = [
            lambda f: np.log(f.gamma[0]), lambda f: np.log(f.gamma[1]),
            lambda f: np.arctan(f.Y[0, 0]), lambda f: np.arctan(f.Y[1, 2]),
            lambda f: np.log(f.gamma_local[0, 1]), lambda f: np.log(f.tau_eps),
        ]
        for g in feats:
            a = np.array([g(f) for f in after])
            b = np.array([g(f) for f in fresh])
            assert stats.ks_2samp(a, b).pvalue > 0.001
            assert abs(a.mean() - b.mean()) < 4 * np.sqrt((a.var() + b.var()) / N)

    def test_shapes(self, rng):
        h = Hyperparams(m=3)
        fs = sample_prior_factors(5, h, rng, n_otus=7)
        new = update_factors(rng.standard_normal((7, 5)), fs, h, rng)
        assert new.X.shape == (3, 7) and new.Y.shape == (3, 5)
        assert np.all(new.gamma > 0) and np.all(new.gamma_local > 0) and new.tau_eps > 0


def _small_table(seed=0, I=10, J=4, total=40):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(I), size=J).T
    return CountTable(np.stack([rng.multinomial(total, P[:, j]) for j in range(J)], axis=1))


class TestRunChain:
    hyper = Hyperparams(alpha=1.0, m=2, iterations=60, burn_in=20, thin=7, seed=7)

    def test_seed_determinism(self):
        t = _small_table()
        a, _ = run_chain(t, self.hyper)
        b, _ = run_chain(t, self.hyper)
        for f in ("sigma", "Q", "Y", "S", "P"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_worker_count_invariance(self):
        t = _small_table()
        a, _ = run_chain(t, self.hyper, n_jobs=1, block_size=3)
        b, _ = run_chain(t, self.hyper, n_jobs=3, block_size=3)
        np.testing.assert_array_equal(a.Q, b.Q)
        np.testing.assert_array_equal(a.S, b.S)

    def test_snapshot_count_and_invariants(self):
        t = _small_table()
        d, diag = run_chain(t, self.hyper)
        assert len(d) == (60 - 20) // 7
        assert d.iterations.tolist() == [26, 33, 40, 47, 54]
        pos = t.counts > 0
        for k in range(len(d)):
            S = d.S[k]
            np.testing.assert_allclose(np.diag(S), 1.0)
            np.testing.assert_allclose(S, S.T, atol=1e-12)
            assert np.linalg.eigvalsh(S).min() > -1e-8
            assert np.all(d.Q[k][pos] > 0)
            np.testing.assert_allclose(d.P[k].sum(axis=0), 1.0)
            assert np.all((d.sigma[k] > 0) & (d.sigma[k] < 1))
        assert 0 <= diag.mh_acceptance_rate <= 1

    def test_error_context(self):
        t = _small_table()
        I, J = t.counts.shape
        Q = np.where(t.counts > 0, 1.0, -0.1)
        Q[:, 1] = -1.0
        state = LatentState(np.full(I, 0.1), Q, np.ones(J))
        fs = FactorState(np.zeros((2, I)), np.ones((2, J)), np.ones(2), np.ones((2, J)), 1.0)
        with pytest.raises(ChainError, match="iteration 0, stage T"):
            run_chain(t, self.hyper, initial=(state, fs))

    def test_acceptance_increases_with_count(self):
        sim = simulate_design(40, 8, 2, 3000, np.random.default_rng(1))
        d, diag = run_chain(sim.counts, Hyperparams(m=3, iterations=300, burn_in=100,
                                                    thin=10, seed=1))
        trials = np.asarray(d.meta["acceptance_trials"])
        hits = np.asarray(d.meta["acceptance_hits"])
        keep = trials >= 1000
        rates = hits[keep] / trials[keep]
        assert keep.sum() >= 4
        assert np.all(np.diff(rates) > -0.02)
        assert acceptance_rate_above(d, 50) > 0.9

    def test_otu_permutation_equivariance_in_law(self):
        # substreams are keyed by row block, so a permuted table gets other
        # random numbers; the posterior itself must follow the permutation
        n = np.array([[3, 1], [0, 2], [1, 0], [0, 0]])
        perm = np.array([2, 0, 3, 1])
        hyper = Hyperparams(alpha=1.0, iterations=8000, burn_in=1000, thin=5, seed=2)
        a, _ = run_chain(CountTable(n), hyper)
        b, _ = run_chain(CountTable(n[perm]), hyper)
        Pa, Pb = a.P.mean(axis=0)[perm], b.P.mean(axis=0)
        assert 0.5 * np.abs(Pa - Pb).sum(axis=0).max() < 0.03
        np.testing.assert_allclose(a.sigma.mean(axis=0)[perm], b.sigma.mean(axis=0), atol=0.03)


class TestTVBound:
    def test_regression_constant(self):
        assert tv_bound(1) == pytest.approx(TV_BOUND_1, abs=1e-12)
        assert oracles.tv_bound_closed(1)[0] == pytest.approx(TV_BOUND_1, abs=1e-10)

    @pytest.mark.parametrize("k", [2, 10, 50, 100])
    def test_matches_closed_form(self, k):
        assert tv_bound(k) == pytest.approx(oracles.tv_bound_closed(k)[0], abs=1e-8)

    def test_decreasing_to_zero(self):
        vals = np.array([tv_bound(k) for k in range(1, 101)])
        assert np.all(np.diff(vals) < 0)
        assert vals[-1] < vals[0] / 10

    def test_domain(self):
        with pytest.raises(ValueError):
            tv_bound(0)
