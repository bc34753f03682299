"""Gamma, inverse-gamma, and scaled chi-square kernels.

Shape/scale parameterization throughout: ``GammaDist(shape, scale)`` has
density x**(shape-1) * exp(-x/scale) / (Gamma(shape) * scale**shape), and
``InverseGammaPrior(shape, scale)`` is the law of the reciprocal of a
``GammaDist(shape, 1/scale)`` variate.  The scaled chi-square family
scale * chisq(df) coincides with Gamma(df/2, 2*scale); it is kept as its own
type because variance-prior derivations state their intermediate stages in
chi-square terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

__all__ = [
    "GammaDist",
    "InverseGammaPrior",
    "ScaledChiSquare",
    "IgStats",
    "ig_stats",
    "chisq_to_gamma",
    "gamma_reciprocal_to_ig",
    "ig_reciprocal_to_gamma",
    "sample",
    "quantile",
    "standard_gamma",
]


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite real, got {value!r}")
    return value


@dataclass(frozen=True)
class GammaDist:
    """Gamma distribution with the given shape and scale."""

    shape: float
    scale: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    @property
    def rate(self) -> float:
        return 1.0 / self.scale

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale * self.scale

    @property
    def mode(self) -> float | None:
        """Interior mode, or None when the density peaks at the origin."""
        if self.shape > 1.0:
            return (self.shape - 1.0) * self.scale
        return None

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = np.where(x > 0.0, x, 1.0)
            val = (
                (self.shape - 1.0) * np.log(xs)
                - xs / self.scale
                - special.gammaln(self.shape)
                - self.shape * math.log(self.scale)
            )
        out = np.where(x > 0.0, val, -np.inf)
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(
            x > 0.0, special.gammainc(self.shape, np.maximum(x, 0.0) / self.scale), 0.0
        )
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class InverseGammaPrior:
    """Inverse-gamma distribution, the conjugate prior for a normal variance."""

    shape: float
    scale: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    @property
    def mode(self) -> float:
        """scale/(shape+1); exists for every valid parameter pair."""
        return self.scale / (self.shape + 1.0)

    @property
    def mean(self) -> float | None:
        """scale/(shape-1), or None when shape <= 1 (mean diverges)."""
        if self.shape > 1.0:
            return self.scale / (self.shape - 1.0)
        return None

    @property
    def variance(self) -> float | None:
        if self.shape > 2.0:
            a, b = self.shape, self.scale
            return b * b / ((a - 1.0) ** 2 * (a - 2.0))
        return None

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = np.where(x > 0.0, x, 1.0)
            val = (
                self.shape * math.log(self.scale)
                - special.gammaln(self.shape)
                - (self.shape + 1.0) * np.log(xs)
                - self.scale / xs
            )
        out = np.where(x > 0.0, val, -np.inf)
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        # P(X <= x) = P(1/X >= 1/x) = Q(shape, scale/x)
        x = np.asarray(x, dtype=float)
        xs = np.where(x > 0.0, x, 1.0)
        out = np.where(x > 0.0, special.gammaincc(self.shape, self.scale / xs), 0.0)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScaledChiSquare:
    """scale * chisq(df), with fractional df allowed."""

    df: float
    scale: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "df", _positive("df", self.df))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    def to_gamma(self) -> GammaDist:
        return GammaDist(shape=self.df / 2.0, scale=2.0 * self.scale)

    @property
    def mean(self) -> float:
        return self.scale * self.df

    @property
    def mode(self) -> float:
        return self.scale * max(self.df - 2.0, 0.0)

    @property
    def variance(self) -> float:
        return 2.0 * self.df * self.scale * self.scale

    def pdf(self, x):
        return self.to_gamma().pdf(x)

    def cdf(self, x):
        return self.to_gamma().cdf(x)


@dataclass(frozen=True)
class IgStats:
    """Moment summary of an inverse gamma; absent moments are None."""

    mode: float
    mean: float | None
    variance: float | None


def ig_stats(prior: InverseGammaPrior) -> IgStats:
    """Mode (always defined), mean (shape > 1), variance (shape > 2)."""
    return IgStats(mode=prior.mode, mean=prior.mean, variance=prior.variance)


def chisq_to_gamma(df: float, scale: float) -> GammaDist:
    """Scaled chi-square as a gamma: scale*chisq(df) ~ Gamma(df/2, 2*scale)."""
    return ScaledChiSquare(df=df, scale=scale).to_gamma()


def gamma_reciprocal_to_ig(g: GammaDist) -> InverseGammaPrior:
    """If P ~ Gamma(shape, scale) then 1/P ~ InverseGamma(shape, 1/scale)."""
    return InverseGammaPrior(shape=g.shape, scale=1.0 / g.scale)


def ig_reciprocal_to_gamma(prior: InverseGammaPrior) -> GammaDist:
    """Inverse of :func:`gamma_reciprocal_to_ig`; exact on parameters."""
    return GammaDist(shape=prior.shape, scale=1.0 / prior.scale)


def standard_gamma(rng: np.random.Generator, shape: float, size: int) -> np.ndarray:
    """Draws from Gamma(shape, 1) via squeeze/rejection.

    Uses the cube-of-normal proposal with the quartic squeeze for shape >= 1
    and the U**(1/shape) boost below 1, so tiny shapes (e.g. 0.01) stay exact.
    """
    if shape <= 0.0 or not math.isfinite(shape):
        raise ValueError(f"shape must be positive and finite, got {shape!r}")
    if size < 0:
        raise ValueError("size must be nonnegative")
    if shape < 1.0:
        base = standard_gamma(rng, shape + 1.0, size)
        u = rng.random(size)
        return base * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size, dtype=float)
    filled = 0
    while filled < size:
        todo = size - filled
        x = rng.standard_normal(todo)
        u = rng.random(todo)
        v = (1.0 + c * x) ** 3
        pos = v > 0.0
        x2 = x * x
        accept = pos & (u < 1.0 - 0.0331 * x2 * x2)
        vsafe = np.where(pos, v, 1.0)
        with np.errstate(divide="ignore"):
            slow = (
                pos
                & ~accept
                & (np.log(u) < 0.5 * x2 + d * (1.0 - vsafe + np.log(vsafe)))
            )
        accept |= slow
        k = int(np.count_nonzero(accept))
        if k:
            out[filled : filled + k] = d * v[accept]
            filled += k
    return out


Distribution = Union[GammaDist, InverseGammaPrior, ScaledChiSquare]


def sample(dist: Distribution, rng: np.random.Generator, size: int | None = None):
    """Draw from the exact distribution using the caller-owned stream.

    Returns a scalar when ``size`` is None, else an array of that length.
    Inverse-gamma draws are realized as reciprocals of gamma draws.
    """
    n = 1 if size is None else int(size)
    if n < 0:
        raise ValueError("size must be nonnegative")
    if isinstance(dist, ScaledChiSquare):
        dist = dist.to_gamma()
    if isinstance(dist, GammaDist):
        draws = standard_gamma(rng, dist.shape, n) * dist.scale
    elif isinstance(dist, InverseGammaPrior):
        draws = dist.scale / standard_gamma(rng, dist.shape, n)
    else:
        raise TypeError(f"cannot sample from {type(dist).__name__}")
    if size is None:
        return float(draws[0])
    return draws


def quantile(dist: Distribution, p: float) -> float:
    """Quantile by bracketed bisection on the CDF.

    Inverse-gamma quantiles come from the reciprocal identity
    q_IG(p) = 1 / q_Gamma(1 - p).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly inside (0, 1), got {p!r}")
    if isinstance(dist, ScaledChiSquare):
        dist = dist.to_gamma()
    if isinstance(dist, GammaDist):
        return _gamma_quantile(dist.shape, dist.scale, p)
    if isinstance(dist, InverseGammaPrior):
        return 1.0 / _gamma_quantile(dist.shape, 1.0 / dist.scale, 1.0 - p)
    raise TypeError(f"no quantile rule for {type(dist).__name__}")


def _gamma_cdf(shape: float, scale: float, x: float) -> float:
    return float(special.gammainc(shape, x / scale))


def _gamma_quantile(shape: float, scale: float, p: float) -> float:
    hi = shape * scale + 10.0 * math.sqrt(shape) * scale
    for _ in range(2000):
        if _gamma_cdf(shape, scale, hi) >= p:
            break
        hi *= 2.0
    lo = hi
    for _ in range(5000):
        lo /= 16.0
        if _gamma_cdf(shape, scale, lo) < p:
            break
        if lo < 1e-300:
            break
    # geometric bisection keeps precision across the huge dynamic range the
    # small-shape tails reach
    for _ in range(600):
        mid = math.sqrt(lo) * math.sqrt(hi)
        if _gamma_cdf(shape, scale, mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return 0.5 * (lo + hi)
