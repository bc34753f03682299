"""Mode-anchored inverse-gamma prior construction.

Two constructors cover the two published derivation routes.  The
effective-df recipe picks a target mode m and a strength a and sets
scale = m*(a+1), which pins the prior mode at m exactly.  The
sample-statistics pipeline walks a sample SD and its degrees of freedom
through scaled chi-square and gamma stages before landing on the inverse
gamma; its strength is data-scale dependent (shape = sd**2 + 1).  Subsample
scaling and strength perturbation reuse the same mode-anchoring identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .distributions import GammaDist, InverseGammaPrior

__all__ = [
    "ModeTarget",
    "PriorStrength",
    "DerivationTrace",
    "SubsampleRule",
    "mode_matched_ig",
    "make_ig_from_mode",
    "derive_ig_from_sd",
    "scale_for_subsample",
    "perturb_strength",
    "emit_prior_syntax",
    "PRIOR_DIALECTS",
]

_MODE_SOURCES = ("stated_sd", "stated_variance", "posterior_estimate")
PRIOR_DIALECTS = ("mplus-ig", "bugs-precision-gamma")


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite real, got {value!r}")
    return value


@dataclass(frozen=True)
class ModeTarget:
    """Target mode for a variance prior, in variance units.

    ``source`` records where the number came from; when it is a stated SD the
    originating value is retained and ``mode == sd * sd`` exactly.
    """

    mode: float
    source: str = "stated_variance"
    sd: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", _positive("mode", self.mode))
        if self.source not in _MODE_SOURCES:
            raise ValueError(f"source must be one of {_MODE_SOURCES}, got {self.source!r}")
        if self.source == "stated_sd":
            if self.sd is None:
                raise ValueError("stated_sd targets must retain the originating sd")
            sd = _positive("sd", self.sd)
            object.__setattr__(self, "sd", sd)
            if self.mode != sd * sd:
                raise ValueError("stated_sd target requires mode == sd**2 exactly")
        elif self.sd is not None:
            raise ValueError("sd is only meaningful when source='stated_sd'")

    @classmethod
    def from_sd(cls, sd: float) -> "ModeTarget":
        sd = _positive("sd", sd)
        return cls(mode=sd * sd, source="stated_sd", sd=sd)

    @classmethod
    def from_variance(cls, variance: float) -> "ModeTarget":
        return cls(mode=variance, source="stated_variance")

    @classmethod
    def from_posterior(cls, estimate: float) -> "ModeTarget":
        return cls(mode=estimate, source="posterior_estimate")


@dataclass(frozen=True)
class PriorStrength:
    """Prior strength expressed as effective degrees of freedom."""

    effective_df: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "effective_df", _positive("effective_df", self.effective_df)
        )

    @property
    def shape(self) -> float:
        return self.effective_df / 2.0

    @classmethod
    def from_shape(cls, shape: float) -> "PriorStrength":
        return cls(effective_df=2.0 * _positive("shape", shape))


def mode_matched_ig(mode: float, shape: float) -> InverseGammaPrior:
    """Inverse gamma with the given shape whose mode sits exactly at ``mode``."""
    mode = _positive("mode", mode)
    shape = _positive("shape", shape)
    return InverseGammaPrior(shape=shape, scale=mode * (shape + 1.0))


def make_ig_from_mode(target: ModeTarget, strength: PriorStrength) -> InverseGammaPrior:
    """Effective-df recipe: IG(a, m*(a+1)) with a = effective_df / 2."""
    return mode_matched_ig(target.mode, strength.shape)


@dataclass(frozen=True)
class DerivationTrace:
    """Full record of the SD-and-df prior derivation.

    Stages: weight applied to the df-scaled chi-square, the equivalent gamma,
    and the final inverse gamma.  Intermediates are carried at full
    precision; any display rounding happens at serialization boundaries
    elsewhere.
    """

    target_sd: float
    df: float
    target_mode: float
    weight: float
    chisq_mean: float
    chisq_mode: float
    chisq_variance: float
    gamma: GammaDist
    ig: InverseGammaPrior

    def to_dict(self) -> dict:
        return {
            "inputs": {
                "target_sd": self.target_sd,
                "df": self.df,
                "target_mode": self.target_mode,
            },
            "weight": self.weight,
            "scaled_chi_square": {
                "mean": self.chisq_mean,
                "mode": self.chisq_mode,
                "variance": self.chisq_variance,
            },
            "gamma": {
                "shape": self.gamma.shape,
                "scale": self.gamma.scale,
                "rate": self.gamma.rate,
                "mean": self.gamma.mean,
                "mode": self.gamma.mode,
                "variance": self.gamma.variance,
            },
            "inverse_gamma": {
                "shape": self.ig.shape,
                "scale": self.ig.scale,
                "mode": self.ig.mode,
                "mean": self.ig.mean,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DerivationTrace":
        inputs = data["inputs"]
        chi = data["scaled_chi_square"]
        return cls(
            target_sd=float(inputs["target_sd"]),
            df=float(inputs["df"]),
            target_mode=float(inputs["target_mode"]),
            weight=float(data["weight"]),
            chisq_mean=float(chi["mean"]),
            chisq_mode=float(chi["mode"]),
            chisq_variance=float(chi["variance"]),
            gamma=GammaDist(float(data["gamma"]["shape"]), float(data["gamma"]["scale"])),
            ig=InverseGammaPrior(
                float(data["inverse_gamma"]["shape"]),
                float(data["inverse_gamma"]["scale"]),
            ),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def derive_ig_from_sd(sd: float, df: float) -> DerivationTrace:
    """Derive a mode-matched IG from a sample SD and its degrees of freedom.

    The chain runs scaled-chi-square -> gamma -> inverse gamma.  Closed form:
    the final IG has shape sd**2 + 1 and scale sd**2 * (sd**2 + 2), so its
    mode is sd**2 (the sample variance).
    """
    sd = _positive("sd", sd)
    df = float(df)
    if not math.isfinite(df) or df <= 2.0:
        raise ValueError(f"df must exceed 2 (chi-square mode degenerates), got {df!r}")
    s2 = sd * sd
    weight = (s2 + 2.0) / df
    chisq_mean = weight * df
    chisq_mode = max(chisq_mean - 2.0, 0.0)
    chisq_variance = 2.0 * chisq_mean
    gamma = GammaDist(shape=chisq_mean / 2.0, scale=2.0)
    ig_shape = 0.5 * (chisq_mean + chisq_mode)
    ig_scale = chisq_mean * (ig_shape - 1.0)
    return DerivationTrace(
        target_sd=sd,
        df=df,
        target_mode=s2,
        weight=weight,
        chisq_mean=chisq_mean,
        chisq_mode=chisq_mode,
        chisq_variance=chisq_variance,
        gamma=gamma,
        ig=InverseGammaPrior(shape=ig_shape, scale=ig_scale),
    )


@dataclass(frozen=True)
class SubsampleRule:
    """How prior strength transfers from a full sample to a subsample.

    Cluster-level priors scale by the ratio of cluster counts; residual-level
    priors scale by the ratio of residual degrees of freedom
    (rows - clusters - predictors).
    """

    level: str
    full_df: float
    sub_df: float

    def __post_init__(self) -> None:
        if self.level not in ("l2_clusters", "l1_residual"):
            raise ValueError(f"unknown rule level {self.level!r}")
        object.__setattr__(self, "full_df", _positive("full_df", self.full_df))
        object.__setattr__(self, "sub_df", _positive("sub_df", self.sub_df))
        if self.sub_df > self.full_df:
            raise ValueError("subsample df must not exceed the full-sample df")

    @property
    def ratio(self) -> float:
        return self.sub_df / self.full_df

    @classmethod
    def l2_clusters(cls, full_clusters: float, sub_clusters: float) -> "SubsampleRule":
        return cls("l2_clusters", float(full_clusters), float(sub_clusters))

    @classmethod
    def l1_residual(
        cls,
        full_rows: float,
        full_clusters: float,
        sub_rows: float,
        sub_clusters: float,
        l1_predictors: int,
    ) -> "SubsampleRule":
        full_df = float(full_rows) - float(full_clusters) - int(l1_predictors)
        sub_df = float(sub_rows) - float(sub_clusters) - int(l1_predictors)
        if full_df <= 0.0 or sub_df <= 0.0:
            raise ValueError("residual degrees of freedom must be positive")
        return cls("l1_residual", full_df, sub_df)


def scale_for_subsample(
    full: InverseGammaPrior, mode: float, rule: SubsampleRule
) -> InverseGammaPrior:
    """Shrink a full-sample prior's strength by the rule ratio, keeping the mode."""
    return mode_matched_ig(mode, full.shape * rule.ratio)


def perturb_strength(
    prior: InverseGammaPrior, mode: float, factor: float
) -> InverseGammaPrior:
    """Multiply the shape by ``factor`` and re-anchor the scale at ``mode``."""
    factor = _positive("factor", factor)
    return mode_matched_ig(mode, prior.shape * factor)


def _display_value(value: float) -> str:
    if abs(value) >= 100.0:
        return str(int(round(value)))
    return f"{value:.2f}"


def emit_prior_syntax(
    prior: InverseGammaPrior, parameter_name: str, dialect: str
) -> str:
    """Render the prior as external model syntax.

    ``mplus-ig`` uses the variance-scale IG statement with display rounding
    (nearest integer at >= 100 in magnitude, two decimals below).
    ``bugs-precision-gamma`` states the exact precision-scale equivalent: if
    the variance is IG(a, b), the precision is Gamma(shape=a, rate=b); values
    are written at full repr precision so they parse back exactly.
    """
    if not parameter_name:
        raise ValueError("parameter name must be nonempty")
    if dialect == "mplus-ig":
        return (
            f"{parameter_name} ~ IG({_display_value(prior.shape)}, "
            f"{_display_value(prior.scale)})"
        )
    if dialect == "bugs-precision-gamma":
        return (
            f"{parameter_name}.prec ~ dgamma({prior.shape!r}, {prior.scale!r})"
        )
    raise ValueError(f"dialect must be one of {PRIOR_DIALECTS}, got {dialect!r}")
