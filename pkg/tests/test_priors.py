"""Prior construction: the SD-and-df pipeline, scaling rules, and syntax."""

import json

import pytest

from modematch.priors import (
    DerivationTrace,
    ModeTarget,
    PRIOR_DIALECTS,
    PriorStrength,
    SubsampleRule,
    derive_ig_from_sd,
    emit_prior_syntax,
    make_ig_from_mode,
    mode_matched_ig,
    perturb_strength,
    scale_for_subsample,
)

# Frozen full-precision pipeline outputs for sd=12.38, df=272.
SD_A = 12.38
DF_A = 272.0
WEIGHT_A = 0.5708250000000001
CHISQ_MEAN_A = 155.26440000000002
GAMMA_SHAPE_A = 77.63220000000001
IG_SHAPE_A = 154.26440000000002
IG_SCALE_A = 23796.505107360008

# And for sd=46.17, df=8423.
SD_B = 46.17
DF_B = 8423.0
IG_SHAPE_B = 2132.6689
IG_SCALE_B = 4548275.637027211


class TestModeMatching:
    def test_closed_form(self):
        prior = mode_matched_ig(mode=25.0, shape=15.0)
        assert prior.shape == 15.0
        assert prior.scale == pytest.approx(25.0 * 16.0)
        assert prior.mode == pytest.approx(25.0)

    def test_mode_invariant_across_strengths(self):
        for shape in (0.3, 1.0, 8.5, 154.2644, 4000.0):
            assert mode_matched_ig(7.3, shape).mode == pytest.approx(7.3, rel=1e-14)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            mode_matched_ig(0.0, 3.0)
        with pytest.raises(ValueError):
            mode_matched_ig(1.0, -1.0)

    def test_strength_df_shape_round_trip(self):
        s = PriorStrength(effective_df=272.0)
        assert s.shape == pytest.approx(136.0)
        assert PriorStrength.from_shape(s.shape).effective_df == pytest.approx(272.0)

    def test_make_ig_from_mode(self):
        target = ModeTarget.from_variance(0.4)
        prior = make_ig_from_mode(target, PriorStrength(effective_df=10.0))
        assert prior.shape == pytest.approx(5.0)
        assert prior.scale == pytest.approx(0.4 * 6.0)


class TestModeTarget:
    def test_from_sd_retains_origin(self):
        t = ModeTarget.from_sd(12.38)
        assert t.source == "stated_sd"
        assert t.sd == 12.38
        assert t.mode == 12.38 * 12.38

    def test_stated_sd_must_square(self):
        with pytest.raises(ValueError):
            ModeTarget(mode=150.0, source="stated_sd", sd=12.38)

    def test_sd_requires_stated_sd_source(self):
        with pytest.raises(ValueError):
            ModeTarget(mode=4.0, source="stated_variance", sd=2.0)

    def test_from_posterior(self):
        t = ModeTarget.from_posterior(0.37)
        assert t.source == "posterior_estimate"
        assert t.mode == 0.37

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            ModeTarget(mode=1.0, source="guess")


class TestDerivation:
    def test_pipeline_values(self):
        trace = derive_ig_from_sd(SD_A, DF_A)
        assert trace.weight == pytest.approx(WEIGHT_A, rel=1e-15)
        assert trace.chisq_mean == pytest.approx(CHISQ_MEAN_A, rel=1e-15)
        assert trace.chisq_mode == pytest.approx(CHISQ_MEAN_A - 2.0, rel=1e-15)
        assert trace.chisq_variance == pytest.approx(2.0 * CHISQ_MEAN_A, rel=1e-15)
        assert trace.gamma.shape == pytest.approx(GAMMA_SHAPE_A, rel=1e-15)
        assert trace.gamma.scale == 2.0
        assert trace.ig.shape == pytest.approx(IG_SHAPE_A, rel=1e-15)
        assert trace.ig.scale == pytest.approx(IG_SCALE_A, rel=1e-15)

    def test_final_mode_is_sample_variance(self):
        for sd, df in ((12.38, 272.0), (46.17, 8423.0), (0.63, 29.0)):
            trace = derive_ig_from_sd(sd, df)
            assert trace.ig.mode == pytest.approx(sd * sd, rel=1e-12)
            assert trace.target_mode == sd * sd

    def test_second_case(self):
        trace = derive_ig_from_sd(SD_B, DF_B)
        assert trace.ig.shape == pytest.approx(IG_SHAPE_B, rel=1e-12)
        assert trace.ig.scale == pytest.approx(IG_SCALE_B, rel=1e-12)

    def test_closed_form_shortcut(self):
        # The chain collapses to shape = s2 + 1, scale = s2 * (s2 + 2),
        # independent of df (df only gates validity and sets the weight).
        trace = derive_ig_from_sd(3.0, 57.0)
        assert trace.ig.shape == pytest.approx(10.0, rel=1e-14)
        assert trace.ig.scale == pytest.approx(9.0 * 11.0, rel=1e-14)

    def test_gamma_stage_matches_chisq_mean(self):
        trace = derive_ig_from_sd(5.0, 100.0)
        assert trace.gamma.mean == pytest.approx(trace.chisq_mean, rel=1e-14)
        assert trace.gamma.variance == pytest.approx(trace.chisq_variance, rel=1e-14)

    def test_rejects_small_df(self):
        with pytest.raises(ValueError):
            derive_ig_from_sd(12.38, 2.0)
        with pytest.raises(ValueError):
            derive_ig_from_sd(12.38, float("nan"))

    def test_rejects_nonpositive_sd(self):
        with pytest.raises(ValueError):
            derive_ig_from_sd(0.0, 100.0)

    def test_trace_round_trip(self):
        trace = derive_ig_from_sd(SD_A, DF_A)
        back = DerivationTrace.from_dict(json.loads(trace.to_json()))
        assert back.target_sd == trace.target_sd
        assert back.df == trace.df
        assert back.weight == trace.weight
        assert back.chisq_mean == trace.chisq_mean
        assert back.gamma.shape == trace.gamma.shape
        assert back.ig.shape == trace.ig.shape
        assert back.ig.scale == trace.ig.scale
        assert back.to_json() == trace.to_json()


class TestSubsample:
    def test_l2_ratio(self):
        rule = SubsampleRule.l2_clusters(273, 30)
        assert rule.ratio == pytest.approx(30.0 / 273.0)

    def test_l1_residual_df(self):
        rule = SubsampleRule.l1_residual(100, 10, 40, 8, 2)
        assert rule.full_df == pytest.approx(88.0)
        assert rule.sub_df == pytest.approx(30.0)
        assert rule.ratio == pytest.approx(30.0 / 88.0)

    def test_sub_cannot_exceed_full(self):
        with pytest.raises(ValueError):
            SubsampleRule.l2_clusters(30, 273)

    def test_residual_df_must_be_positive(self):
        with pytest.raises(ValueError):
            SubsampleRule.l1_residual(12, 10, 11, 10, 2)

    def test_scale_preserves_mode_and_shrinks_shape(self):
        full = mode_matched_ig(153.2644, IG_SHAPE_A)
        rule = SubsampleRule.l2_clusters(273, 30)
        sub = scale_for_subsample(full, 153.2644, rule)
        assert sub.shape == pytest.approx(16.952131868131872, rel=1e-14)
        assert sub.scale == pytest.approx(2751.4227194901105, rel=1e-14)
        assert sub.mode == pytest.approx(153.2644, rel=1e-12)

    def test_scale_is_mode_matched_by_construction(self):
        full = mode_matched_ig(0.4, 50.0)
        rule = SubsampleRule.l2_clusters(100, 10)
        sub = scale_for_subsample(full, 0.4, rule)
        assert sub.scale == pytest.approx(0.4 * (sub.shape + 1.0), rel=1e-14)


class TestPerturbation:
    def test_recompute_oracle(self):
        base = mode_matched_ig(0.4, 20.0)
        for factor in (0.75, 1.25):
            shifted = perturb_strength(base, 0.4, factor)
            assert shifted.shape == pytest.approx(20.0 * factor, rel=1e-14)
            assert shifted.scale == pytest.approx(0.4 * (20.0 * factor + 1.0), rel=1e-14)
            assert shifted.mode == pytest.approx(0.4, rel=1e-13)

    def test_identity_factor(self):
        base = mode_matched_ig(2.5, 8.0)
        same = perturb_strength(base, 2.5, 1.0)
        assert same.shape == base.shape
        assert same.scale == pytest.approx(base.scale, rel=1e-15)

    def test_rejects_nonpositive_factor(self):
        with pytest.raises(ValueError):
            perturb_strength(mode_matched_ig(1.0, 2.0), 1.0, 0.0)


class TestSyntax:
    def test_dialect_list(self):
        assert PRIOR_DIALECTS == ("mplus-ig", "bugs-precision-gamma")

    def test_variance_scale_rounds_large_values(self):
        prior = mode_matched_ig(153.2644, IG_SHAPE_A)
        text = emit_prior_syntax(prior, "tau2", "mplus-ig")
        assert text == "tau2 ~ IG(154, 23797)"

    def test_variance_scale_two_decimals_when_small(self):
        prior = mode_matched_ig(0.4, 5.0)
        text = emit_prior_syntax(prior, "tau2", "mplus-ig")
        assert text == "tau2 ~ IG(5.00, 2.40)"

    def test_precision_scale_full_precision(self):
        prior = mode_matched_ig(0.4, 5.0)
        text = emit_prior_syntax(prior, "tau2", "bugs-precision-gamma")
        assert text == f"tau2.prec ~ dgamma({prior.shape!r}, {prior.scale!r})"
        # the numbers must parse back exactly
        inside = text.split("dgamma(")[1].rstrip(")")
        shape, scale = (float(v) for v in inside.split(", "))
        assert shape == prior.shape
        assert scale == prior.scale

    def test_rejects_unknown_dialect(self):
        with pytest.raises(ValueError):
            emit_prior_syntax(mode_matched_ig(1.0, 2.0), "tau2", "stan")

    def test_rejects_empty_name(self):
        with pytest.raises(ValueError):
            emit_prior_syntax(mode_matched_ig(1.0, 2.0), "", "mplus-ig")
