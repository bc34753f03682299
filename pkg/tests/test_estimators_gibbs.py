"""Gibbs sampler: conjugate-conditional oracles, diagnostics, fit statistics."""

import math

import numpy as np
import pytest
from scipy.stats import kstest

from modematch.distributions import InverseGammaPrior
from modematch.estimators import (
    INTERCEPT_VARIANCE,
    RESIDUAL_VARIANCE,
    EstimationError,
    McmcSettings,
    PriorConfig,
    VariancePrior,
    fit_stats,
    gibbs_fit,
    gibbs_fit_multi,
    ml_fit,
    psrf,
    summarize,
)
from modematch.model import ConditionSpec, ModelFormula, generate, solve_condition

FORMULA = ModelFormula.simulation_default()


def small_data(seed=0, j=10, m=5, icc=0.4):
    spec = ConditionSpec(n_clusters=j, cluster_size=m, icc=icc, r2_within=0.0, r2_between=0.0)
    params = solve_condition(spec)
    return generate(spec, params, np.random.default_rng(seed)), params


def flat_config():
    return PriorConfig(
        coef_prior="flat_default",
        l1_variance=VariancePrior.improper_flat(),
        l2_variance=VariancePrior.improper_flat(),
    )


class TestConjugateConditionals:
    """Freeze all other blocks; the remaining draws must be iid from the
    analytic inverse-gamma conditional.  Kolmogorov distance at 20,000 draws
    stays under 0.02 for every prior setting."""

    def run_frozen(self, prior_sig, prior_tau, seed):
        data, params = small_data(seed=seed)
        n, j = data.n_rows, data.n_clusters
        rng = np.random.default_rng(seed + 100)
        beta = rng.normal(scale=0.3, size=5)
        u = rng.normal(scale=0.5, size=j)
        settings = McmcSettings(chains=2, iterations=10_000, burnin=0, thin=1)
        config = PriorConfig(
            coef_prior="flat_default", l1_variance=prior_sig, l2_variance=prior_tau
        )
        _, draws = gibbs_fit(
            data,
            FORMULA,
            config,
            settings,
            np.random.default_rng(seed),
            return_draws=True,
            _freeze_beta=beta,
            _freeze_u=u,
        )
        from modematch.model import build_design

        design = build_design(data, FORMULA)
        resid = data.y - design.x @ beta - u[data.cluster]
        ss_resid = float(resid @ resid)
        ss_u = float(u @ u)
        a_sig, b_sig = prior_sig.shape_scale
        a_tau, b_tau = prior_tau.shape_scale
        sig_post = InverseGammaPrior(a_sig + n / 2.0, b_sig + ss_resid / 2.0)
        tau_post = InverseGammaPrior(a_tau + j / 2.0, b_tau + ss_u / 2.0)
        assert draws.sigma2.size == 20_000
        ks_sig = kstest(draws.sigma2, sig_post.cdf).statistic
        ks_tau = kstest(draws.tau2, tau_post.cdf).statistic
        assert ks_sig < 0.02
        assert ks_tau < 0.02

    def test_five_random_prior_settings(self):
        rng = np.random.default_rng(2024)
        for seed in range(5):
            a_sig = float(rng.uniform(2.0, 30.0))
            b_sig = float(rng.uniform(0.5, 20.0))
            a_tau = float(rng.uniform(2.0, 30.0))
            b_tau = float(rng.uniform(0.5, 20.0))
            self.run_frozen(
                VariancePrior.mode_matched(InverseGammaPrior(a_sig, b_sig)),
                VariancePrior.mode_matched(InverseGammaPrior(a_tau, b_tau)),
                seed,
            )

    def test_improper_flat_conditional(self):
        # (shape, scale) = (-1, 0) in the update: posterior IG(n/2-1, SS/2).
        self.run_frozen(VariancePrior.improper_flat(), VariancePrior.improper_flat(), 11)

    def test_weak_conditional(self):
        self.run_frozen(VariancePrior.weak(), VariancePrior.weak(), 12)

    def test_frozen_blocks_stay_frozen(self):
        data, _ = small_data(seed=3)
        beta = np.array([0.1, 0.2, -0.1, 0.0, 0.3])
        u = np.linspace(-1.0, 1.0, data.n_clusters)
        settings = McmcSettings(chains=2, iterations=200, burnin=100)
        _, draws = gibbs_fit(
            data, FORMULA, flat_config(), settings,
            np.random.default_rng(0), return_draws=True,
            _freeze_beta=beta, _freeze_u=u,
        )
        assert np.all(draws.beta == beta[None, :])
        assert np.all(draws.u == u[None, :])


class TestPsrf:
    def test_constant_equal_chains(self):
        assert psrf([[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]]) == 1.0

    def test_constant_disagreeing_chains(self):
        assert psrf([[1.0, 1.0], [2.0, 2.0]]) == math.inf

    def test_hand_computed_value(self):
        # W = 0.5, B/n = 0.5, var_plus = 0.25 + 0.5 -> sqrt(1.5)
        assert psrf([[0.0, 1.0], [1.0, 2.0]]) == pytest.approx(math.sqrt(1.5), rel=1e-12)

    def test_near_one_for_iid_chains(self):
        rng = np.random.default_rng(0)
        chains = rng.standard_normal((4, 20_000))
        assert psrf(chains) < 1.01

    def test_detects_displaced_chain(self):
        rng = np.random.default_rng(1)
        chains = rng.standard_normal((2, 5_000))
        chains[1] += 3.0
        assert psrf(chains) > 1.5

    def test_input_validation(self):
        with pytest.raises(ValueError):
            psrf([[1.0, 2.0]])
        with pytest.raises(ValueError):
            psrf([[1.0], [2.0]])


class TestSummarize:
    def test_frozen_example(self):
        s = summarize(np.arange(1.0, 101.0), 0.95)
        assert s.median == pytest.approx(50.5)
        assert s.lower == pytest.approx(3.475)
        assert s.upper == pytest.approx(97.525)
        assert s.width == pytest.approx(97.525 - 3.475)

    def test_level_changes_tails(self):
        s = summarize(np.arange(1.0, 101.0), 0.50)
        assert s.lower == pytest.approx(25.75)
        assert s.upper == pytest.approx(75.25)

    def test_validation(self):
        with pytest.raises(ValueError):
            summarize([])
        with pytest.raises(ValueError):
            summarize([1.0, 2.0], level=1.0)


class TestGibbsFit:
    def test_deterministic_given_stream(self):
        data, _ = small_data(seed=1)
        settings = McmcSettings(chains=2, iterations=400, burnin=200)
        a = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(42))
        b = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(42))
        for pa, pb in zip(a.params, b.params):
            assert pa.estimate == pb.estimate
            assert pa.lower == pb.lower
            assert pa.rhat == pb.rhat

    def test_batched_matches_single(self):
        data, params = small_data(seed=2)
        settings = McmcSettings(chains=2, iterations=400, burnin=200)
        spec_anchor = (0.0, 0.1, 0.1, 0.2, 0.2)
        configs = [
            flat_config(),
            PriorConfig(
                coef_prior="centered_weak",
                anchor=spec_anchor,
                l1_variance=VariancePrior.weak(),
                l2_variance=VariancePrior.weak(),
            ),
            PriorConfig(
                coef_prior="flat_default",
                l1_variance=VariancePrior.improper_flat(),
                l2_variance=VariancePrior.mode_matched(InverseGammaPrior(5.0, 2.4)),
            ),
        ]
        seeds = [7, 8, 9]
        batched = gibbs_fit_multi(
            data, FORMULA, configs, settings,
            [np.random.default_rng(s) for s in seeds],
        )
        for config, seed, batch_result in zip(configs, seeds, batched):
            single = gibbs_fit(data, FORMULA, config, settings, np.random.default_rng(seed))
            for pa, pb in zip(single.params, batch_result.params):
                assert pa.estimate == pb.estimate
                assert pa.lower == pb.lower
                assert pa.upper == pb.upper
                assert pa.rhat == pb.rhat
                assert pa.se == pb.se
            assert single.stats.ppp == batch_result.stats.ppp
            assert single.stats.dic == batch_result.stats.dic

    def test_stream_count_must_match(self):
        data, _ = small_data(seed=2)
        settings = McmcSettings(chains=2, iterations=100, burnin=50)
        with pytest.raises(ValueError):
            gibbs_fit_multi(
                data, FORMULA, [flat_config(), flat_config()], settings,
                [np.random.default_rng(0)],
            )

    def test_param_layout_and_convergence(self):
        data, _ = small_data(seed=4)
        settings = McmcSettings(chains=2, iterations=2_000, burnin=1_000)
        fit = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(3))
        assert fit.method == "gibbs"
        assert fit.param_names == (
            "intercept", "x1", "x2", "z1", "z2",
            INTERCEPT_VARIANCE, RESIDUAL_VARIANCE,
        )
        for p in fit.params:
            assert p.lower < p.estimate < p.upper
            assert p.rhat is not None and p.rhat < 1.2
            assert p.se is not None and p.se > 0
        assert fit.converged == all(p.rhat <= 1.05 for p in fit.params)

    def test_posterior_concentrates_on_truth(self):
        spec = ConditionSpec(n_clusters=100, cluster_size=10, icc=0.4, r2_within=0.2, r2_between=0.2)
        params = solve_condition(spec)
        data = generate(spec, params, np.random.default_rng(55))
        ml = ml_fit(data, FORMULA)
        settings = McmcSettings(chains=2, iterations=2_000, burnin=1_000)
        fit = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(5), _ml_init=ml)
        truth = params.as_dict()
        mapping = {
            "x1": "within_slope_1", "z1": "between_slope_1",
            INTERCEPT_VARIANCE: "intercept_variance",
            RESIDUAL_VARIANCE: "residual_variance",
        }
        for name, key in mapping.items():
            assert fit[name].lower - 0.05 < truth[key] < fit[name].upper + 0.05
        # with this much data the flat-prior posterior sits on the ML fit
        for name in ("intercept", "x1", "x2", "z1", "z2"):
            assert fit[name].estimate == pytest.approx(ml[name].estimate, abs=0.02)
        for name in (INTERCEPT_VARIANCE, RESIDUAL_VARIANCE):
            assert fit[name].estimate == pytest.approx(ml[name].estimate, rel=0.10)

    def test_improper_flat_needs_enough_clusters(self):
        cluster = np.repeat(np.arange(2), 6)
        rng = np.random.default_rng(0)
        data_arrays = dict(
            cluster=cluster,
            y=rng.standard_normal(12),
            l1={},
            l2={},
        )
        from modematch.model import TwoLevelDataset

        data = TwoLevelDataset(**data_arrays)
        settings = McmcSettings(chains=2, iterations=100, burnin=50)
        with pytest.raises(EstimationError, match="clusters"):
            gibbs_fit(data, ModelFormula(), flat_config(), settings, np.random.default_rng(1))

    def test_informative_prior_pulls_toward_mode(self):
        # Prior mode far above the data's variance level must pull the
        # posterior median upward relative to the flat fit.
        data, _ = small_data(seed=6, j=10, m=5)
        settings = McmcSettings(chains=2, iterations=2_000, burnin=1_000)
        flat = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(7))
        strong_high = PriorConfig(
            coef_prior="flat_default",
            l1_variance=VariancePrior.improper_flat(),
            l2_variance=VariancePrior.mode_matched(
                InverseGammaPrior(shape=50.0, scale=5.0 * 51.0)  # mode 5
            ),
        )
        pulled = gibbs_fit(data, FORMULA, strong_high, settings, np.random.default_rng(7))
        assert pulled[INTERCEPT_VARIANCE].estimate > flat[INTERCEPT_VARIANCE].estimate


class TestFitStatistics:
    def test_ppp_calibrated_on_well_specified_data(self):
        spec = ConditionSpec(n_clusters=20, cluster_size=5, icc=0.3, r2_within=0.0, r2_between=0.0)
        params = solve_condition(spec)
        settings = McmcSettings(chains=2, iterations=1_000, burnin=500)
        ppps = []
        for seed in range(20):
            data = generate(spec, params, np.random.default_rng(seed))
            fit = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(seed + 1))
            ppps.append(fit.stats.ppp)
        mean_ppp = float(np.mean(ppps))
        assert 0.3 < mean_ppp < 0.7
        assert all(0.02 < p < 0.98 for p in ppps)

    def test_pd_reflects_conditional_focus(self):
        # Conditional deviance counts cluster intercepts as parameters, so
        # pD lands between the fixed-effect count and J + P.
        data, _ = small_data(seed=9, j=30, m=5)
        settings = McmcSettings(chains=2, iterations=2_000, burnin=1_000)
        fit = gibbs_fit(data, FORMULA, flat_config(), settings, np.random.default_rng(2))
        assert 5.0 < fit.stats.p_d < 30.0 + 5.0 + 2.0
        assert fit.stats.dic == pytest.approx(
            fit.stats.p_d + (fit.stats.dic - fit.stats.p_d), rel=1e-12
        )

    def test_shortcut_matches_literal_replication(self):
        data, _ = small_data(seed=10)
        settings = McmcSettings(chains=2, iterations=4_000, burnin=2_000)
        fit, draws = gibbs_fit(
            data, FORMULA, flat_config(), settings,
            np.random.default_rng(11), return_draws=True,
        )
        literal = fit_stats(draws, data, FORMULA, rng=np.random.default_rng(99))
        # Two Monte Carlo estimates of the same functionals.
        assert literal.ppp == pytest.approx(fit.stats.ppp, abs=0.05)
        assert literal.p_d == pytest.approx(fit.stats.p_d, abs=0.05)
        assert literal.dic == pytest.approx(fit.stats.dic, abs=0.1)
        lo_a, hi_a = literal.ppc_interval
        lo_b, hi_b = fit.stats.ppc_interval
        scale = max(abs(lo_b), abs(hi_b), 1.0)
        assert abs(lo_a - lo_b) / scale < 0.15
        assert abs(hi_a - hi_b) / scale < 0.15

    def test_dic_decomposition_under_frozen_blocks(self):
        # With beta and u frozen, the deviance varies only through sigma2,
        # so pD can be recomputed directly from the kept draws.
        data, _ = small_data(seed=12)
        from modematch.model import build_design

        design = build_design(data, FORMULA)
        beta = np.zeros(5)
        u = np.zeros(data.n_clusters)
        resid = data.y - design.x @ beta
        ss = float(resid @ resid)
        n = data.n_rows
        settings = McmcSettings(chains=2, iterations=4_000, burnin=2_000)
        fit, draws = gibbs_fit(
            data, FORMULA, flat_config(), settings,
            np.random.default_rng(13), return_draws=True,
            _freeze_beta=beta, _freeze_u=u,
        )
        dev = n * np.log(2 * math.pi * draws.sigma2) + ss / draws.sigma2
        sig_bar = float(np.mean(draws.sigma2))
        expected_pd = float(np.mean(dev)) - (n * math.log(2 * math.pi * sig_bar) + ss / sig_bar)
        assert fit.stats.p_d == pytest.approx(expected_pd, rel=1e-10)
        assert fit.stats.dic == pytest.approx(float(np.mean(dev)) + expected_pd, rel=1e-10)


class TestPriorConfigValidation:
    def test_anchor_requires_centered_weak(self):
        with pytest.raises(ValueError):
            PriorConfig(coef_prior="flat_default", anchor=(0.0,))

    def test_centered_weak_requires_anchor(self):
        with pytest.raises(ValueError):
            PriorConfig(coef_prior="centered_weak")

    def test_anchor_length_checked_at_use(self):
        config = PriorConfig(coef_prior="centered_weak", anchor=(0.0, 0.1))
        with pytest.raises(ValueError, match="anchor"):
            config.anchor_vector(5)

    def test_variance_prior_kinds(self):
        assert VariancePrior.improper_flat().shape_scale == (-1.0, 0.0)
        assert VariancePrior.weak().shape_scale == (0.01, 0.01)
        ig = InverseGammaPrior(5.0, 2.4)
        assert VariancePrior.mode_matched(ig).shape_scale == (5.0, 2.4)
        with pytest.raises(ValueError):
            VariancePrior("mode_matched")
        with pytest.raises(ValueError):
            VariancePrior("weak", ig)
        with pytest.raises(ValueError):
            VariancePrior("lognormal")


class TestMcmcSettings:
    def test_burnin_defaults_to_half(self):
        s = McmcSettings(chains=2, iterations=5000)
        assert s.burnin == 2500
        assert s.kept_per_chain == 2500

    def test_thinning_counts(self):
        s = McmcSettings(chains=2, iterations=1000, burnin=500, thin=3)
        assert s.kept_per_chain == len(range(500, 1000, 3))

    def test_validation(self):
        with pytest.raises(ValueError):
            McmcSettings(chains=1)
        with pytest.raises(ValueError):
            McmcSettings(chains=2, iterations=100, burnin=100)
        with pytest.raises(ValueError):
            McmcSettings(chains=2, iterations=100, thin=0)
        with pytest.raises(ValueError):
            McmcSettings(chains=2, psrf_threshold=1.0)
