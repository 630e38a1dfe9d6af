import numpy as np
import pytest
from scipy import integrate, stats

from ddfactor.model import (CountTable, DegenerateColumnError, Hyperparams,
                            block_loadings, compose_measures, estimate_eta,
                            gram_normalize, normalized_gram, sample_prior_factors,
                            sample_prior_sigma, simulate_dataset, simulate_design,
                            simulate_misspecified)


class TestCountTable:
    def test_labels_default_and_shape(self):
        t = CountTable([[1, 2], [3, 4]])
        assert t.otu_ids == ["otu0", "otu1"]
        assert t.sample_ids == ["sample0", "sample1"]
        assert t.counts.dtype == np.int64
        np.testing.assert_array_equal(t.sample_totals, [4, 6])

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="row 1, column 0"):
            CountTable([[1, 2], [-1, 4]])

    def test_rejects_fractional(self):
        with pytest.raises(ValueError, match="integers"):
            CountTable([[1.5, 2.0]])

    def test_rejects_duplicate_labels(self):
        with pytest.raises(ValueError, match="duplicate OTU"):
            CountTable([[1], [2]], otu_ids=["a", "a"])

    def test_fittable_requires_positive_totals(self):
        t = CountTable([[0, 1], [0, 2]])
        with pytest.raises(ValueError, match="sample0"):
            t.check_fittable()


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert (h.alpha, h.a1, h.a2, h.v) == (10.0, 2.0, 3.0, 3.0)
        assert h.n_factors(22) == 15 and h.n_factors(4) == 4
        np.testing.assert_array_equal(h.shrinkage_shapes(3), [2.0, 3.0, 3.0])

    @pytest.mark.parametrize("kw", [{"a2": 1.0}, {"alpha": -1}, {"thin": 0},
                                    {"burn_in": 50, "iterations": 50}, {"v": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Hyperparams(**kw).validate()

    def test_alpha_over_I(self):
        with pytest.raises(ValueError, match="alpha/I"):
            Hyperparams(alpha=10).validate(20)


class TestPriorSigma:
    def test_single_draw(self, rng):
        s = sample_prior_sigma(1, 0.1, rng)
        assert s.shape == (1,) and 0 < s[0] < 1

    def test_rejects_large_eps(self, rng):
        with pytest.raises(ValueError):
            sample_prior_sigma(2, 1.0, rng)

    def test_mean_matches_beta_identity(self, rng):
        I, alpha = 10**4, 1.0
        eps = alpha / I
        s = sample_prior_sigma(I, alpha, rng)
        mean = eps / 0.5
        var = eps * (0.5 - eps) / (0.5**2 * 1.5)
        assert abs(s.mean() - mean) < 3 * np.sqrt(var / I)

    def test_expected_interval_count_matches_intensity(self):
        # I * P(sigma in (0.5, 0.9]) converges to the Levy intensity integral
        I, alpha = 10**4, 1.0
        eps = alpha / I
        exact = I * (stats.beta.cdf(0.9, eps, 0.5 - eps) - stats.beta.cdf(0.5, eps, 0.5 - eps))
        target = integrate.quad(lambda s: s**-1 * (1 - s) ** -0.5, 0.5, 0.9)[0]
        assert abs(exact / target - 1) < 1e-3


class TestPriorFactors:
    def test_large_a1_shrinks_first_factor(self, rng):
        h = Hyperparams(m=1, a1=1e6)
        Y = np.array([sample_prior_factors(4, h, rng).Y for _ in range(500)])
        assert np.abs(Y).max() < 0.05

    def test_variance_decreases_with_index(self, rng):
        h = Hyperparams(m=3, a1=3.0, a2=3.0, v=3.0)
        Y = np.array([sample_prior_factors(2, h, rng).Y for _ in range(10**5)])
        # heavy tails: compare a robust scale, the mean absolute deviation
        scale = np.abs(Y).mean(axis=(0, 2))
        assert scale[0] > scale[1] > scale[2]

    def test_large_v_turns_off_local_shrinkage(self, rng):
        h = Hyperparams(m=2, v=1e8)
        gl = sample_prior_factors(5, h, rng).gamma_local
        np.testing.assert_allclose(gl, 1.0, atol=1e-3)

    def test_shapes(self, rng):
        fs = sample_prior_factors(6, Hyperparams(m=4), rng, n_otus=9)
        assert fs.X.shape == (4, 9) and fs.Y.shape == (4, 6)
        assert fs.gamma.shape == (4,) and fs.gamma_local.shape == (4, 6)
        assert fs.tau_eps > 0


class TestComposeMeasures:
    @pytest.mark.parametrize("sigma,q,expected", [
        ((0.5, 0.5), (1.0, -1.0), (1.0, 0.0)),
        ((0.2, 0.8), (1.0, 1.0), (0.2, 0.8)),
        ((0.5, 0.5), (2.0, 1.0), (0.8, 0.2)),
    ])
    def test_examples(self, sigma, q, expected):
        P = compose_measures(np.array(sigma), np.array(q)[:, None])
        np.testing.assert_allclose(P[:, 0], expected, atol=1e-15)

    def test_degenerate_column(self):
        with pytest.raises(DegenerateColumnError) as err:
            compose_measures([0.5, 0.5], [[1.0, -1.0], [2.0, 0.0]])
        assert err.value.columns == [1]

    def test_positive_sign_weights_are_dirichlet(self, rng):
        # sigma * Q+^2 is Gamma(eps) on positive coordinates, so one margin of
        # the normalized weights is Beta(eps, (k-1) eps) given k positive signs
        I, alpha = 50, 5.0
        eps = alpha / I
        hyper = Hyperparams(alpha=alpha)
        u = []
        for _ in range(10**4):
            sigma = sample_prior_sigma(I, alpha, rng)
            fs = sample_prior_factors(1, hyper, rng, n_otus=I)
            q = fs.X.T @ fs.Y + rng.standard_normal((I, 1)) / np.sqrt(fs.tau_eps)
            k = int((q > 0).sum())
            if q[0, 0] > 0 and k > 1:
                u.append(stats.beta.cdf(compose_measures(sigma, q)[0, 0], eps, (k - 1) * eps))
        assert stats.kstest(u, "uniform").pvalue > 0.01


class TestMisspecified:
    def test_power_two_matches_compose(self, rng):
        sigma = rng.uniform(size=7)
        X, Y = rng.standard_normal((3, 7)), rng.standard_normal((3, 4))
        np.testing.assert_array_equal(simulate_misspecified(sigma, X, Y, 2),
                                      compose_measures(sigma, X.T @ Y))

    @pytest.mark.parametrize("a,expected", [(1, (2 / 3, 1 / 3)), (3, (8 / 9, 1 / 9))])
    def test_examples(self, a, expected):
        X = np.array([[2.0, 1.0]])
        Y = np.array([[1.0]])
        P = simulate_misspecified(np.array([0.5, 0.5]), X, Y, a)
        np.testing.assert_allclose(P[:, 0], expected, rtol=1e-14)


class TestEta:
    def test_phi_one_is_one(self, rng):
        assert estimate_eta(1.0, 10, 100, mc_reps=200, rng=rng) == pytest.approx(1.0, abs=1e-12)

    def test_phi_zero_positive_below_one(self, rng):
        eta = estimate_eta(0.0, 10, 200, mc_reps=4000, rng=rng)
        assert 0 < eta < 1

    def test_monotone_in_phi(self):
        grid = np.linspace(-0.9, 0.9, 7)
        etas = [estimate_eta(p, 100, 1000, mc_reps=3000, rng=np.random.default_rng(5))
                for p in grid]
        # common random numbers keep the comparison tight
        assert all(b >= a - 0.02 for a, b in zip(etas, etas[1:]))
        assert etas[-1] > etas[0] + 0.3

    def test_requires_mc_reps(self):
        with pytest.raises(ValueError):
            estimate_eta(0.5, 10, 100, mc_reps=50)


class TestSimulateDataset:
    def test_point_mass(self, rng):
        P = np.zeros((5, 1))
        P[3] = 1.0
        t = simulate_dataset(P, 100, rng)
        np.testing.assert_array_equal(t.counts[:, 0], [0, 0, 0, 100, 0])

    def test_totals_exact(self, rng):
        P = rng.dirichlet(np.ones(8), size=4).T
        t = simulate_dataset(P, [10, 20, 30, 40], rng)
        np.testing.assert_array_equal(t.sample_totals, [10, 20, 30, 40])

    def test_law_of_large_numbers(self, rng):
        P = rng.dirichlet(np.ones(20), size=2).T
        t = simulate_dataset(P, 10**6, rng)
        tv = 0.5 * np.abs(t.counts / 10**6 - P).sum(axis=0)
        assert tv.max() < 1e-2


class TestGram:
    def test_unit_diagonal_and_zero_column(self):
        Y = np.array([[1.0, 0.0, 2.0], [1.0, 0.0, 0.0]])
        S = normalized_gram(Y)
        np.testing.assert_allclose(np.diag(S), 1.0)
        assert S[1, 0] == 0.0 and S[1, 2] == 0.0
        assert S[0, 2] == pytest.approx(1 / np.sqrt(2))

    def test_psd(self, rng):
        S = gram_normalize(np.cov(rng.standard_normal((6, 30))))
        assert np.linalg.eigvalsh(S).min() > -1e-8


class TestDesigns:
    def test_block_structure(self, rng):
        Y = block_loadings(22, 3, rng)
        assert np.all(Y[2:, :11] == 0) and np.all(Y[:2, 11:] == 0)

    def test_theta_equicorrelation(self):
        rng = np.random.default_rng(3)
        ys = np.array([block_loadings(4, 2, rng, theta=0.7)[0, :2] for _ in range(20000)])
        assert np.corrcoef(ys.T)[0, 1] == pytest.approx(0.7, abs=0.03)

    def test_design_shape(self, rng):
        sim = simulate_design(68, 22, 3, 1000, rng)
        assert sim.counts.counts.shape == (68, 22)
        np.testing.assert_array_equal(sim.counts.sample_totals, 1000)
        np.testing.assert_allclose(sim.P.sum(axis=0), 1.0)
