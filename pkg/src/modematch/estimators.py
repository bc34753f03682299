"""Estimation for the two-level random-intercept model.

Two fitting routes share the same marginal model (per-cluster covariance
sigma2*I + tau2*J):

* ``ml_fit`` maximizes the marginal likelihood by profiling.  For a fixed
  variance ratio lam = tau2/sigma2 the GLS coefficients and sigma2 have
  closed forms, so the search is one-dimensional.
* ``gibbs_fit`` runs a blocked conjugate Gibbs sampler.  Every prior regime
  keeps the conditionals exactly normal or inverse gamma, so draws are exact
  (no Metropolis step).  The improper flat variance prior enters the update
  arithmetic as (shape, scale) = (-1, 0) and never becomes a distribution
  object.

Both produce a ``FitResult``: per-parameter point estimate, interval, scale
reduction (Bayesian only), standard error, plus fit statistics (PPP, DIC,
pD) on the Bayesian side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .distributions import InverseGammaPrior, standard_gamma
from .model import DesignMatrices, ModelFormula, TwoLevelDataset, build_design

__all__ = [
    "EstimationError",
    "VariancePrior",
    "PriorConfig",
    "McmcSettings",
    "ParamEstimate",
    "FitStats",
    "FitResult",
    "GibbsDraws",
    "PosteriorSummary",
    "ml_fit",
    "gibbs_fit",
    "gibbs_fit_multi",
    "fit_stats",
    "psrf",
    "summarize",
    "marginal_loglik",
    "WALD_Z",
    "RESULT_CSV_HEADER",
]

# two-sided 95% normal quantile
WALD_Z = 1.959963984540054

COEF_PRIOR_VARIANCE = 10000.0

INTERCEPT_VARIANCE = "intercept_variance"
RESIDUAL_VARIANCE = "residual_variance"

RESULT_CSV_HEADER = (
    "method",
    "parameter",
    "estimate",
    "lower",
    "upper",
    "width",
    "rhat",
    "se",
    "converged",
)


class EstimationError(RuntimeError):
    """A fit could not be carried out (singular design, improper posterior)."""


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class VariancePrior:
    """Prior on one variance component.

    ``improper_flat`` contributes (shape, scale) = (-1, 0) to the conjugate
    update, ``weak`` contributes (.01, .01), and ``mode_matched`` carries an
    explicit inverse-gamma prior.
    """

    kind: str
    ig: InverseGammaPrior | None = None

    _KINDS = ("improper_flat", "weak", "mode_matched")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"kind must be one of {self._KINDS}, got {self.kind!r}")
        if self.kind == "mode_matched":
            if not isinstance(self.ig, InverseGammaPrior):
                raise ValueError("mode_matched priors require an InverseGammaPrior")
        elif self.ig is not None:
            raise ValueError(f"{self.kind!r} priors carry no distribution")

    @classmethod
    def improper_flat(cls) -> "VariancePrior":
        return cls("improper_flat")

    @classmethod
    def weak(cls) -> "VariancePrior":
        return cls("weak")

    @classmethod
    def mode_matched(cls, ig: InverseGammaPrior) -> "VariancePrior":
        return cls("mode_matched", ig)

    @property
    def shape_scale(self) -> tuple[float, float]:
        if self.kind == "improper_flat":
            return (-1.0, 0.0)
        if self.kind == "weak":
            return (0.01, 0.01)
        assert self.ig is not None
        return (self.ig.shape, self.ig.scale)


@dataclass(frozen=True)
class PriorConfig:
    """Joint prior regime: coefficient prior plus the two variance priors.

    Coefficient priors are normal with variance 10,000 per coordinate,
    centered at zero (``flat_default``) or at a supplied anchor vector
    (``centered_weak``).
    """

    coef_prior: str = "flat_default"
    anchor: tuple[float, ...] | None = None
    l1_variance: VariancePrior = field(default_factory=VariancePrior.improper_flat)
    l2_variance: VariancePrior = field(default_factory=VariancePrior.improper_flat)

    def __post_init__(self) -> None:
        if self.coef_prior not in ("flat_default", "centered_weak"):
            raise ValueError(f"unknown coefficient prior {self.coef_prior!r}")
        if self.coef_prior == "centered_weak":
            if self.anchor is None:
                raise ValueError("centered_weak coefficient priors require an anchor")
            object.__setattr__(self, "anchor", tuple(float(v) for v in self.anchor))
        elif self.anchor is not None:
            raise ValueError("anchor is only meaningful for centered_weak priors")

    def anchor_vector(self, n_coef: int) -> np.ndarray:
        if self.coef_prior == "flat_default":
            return np.zeros(n_coef)
        assert self.anchor is not None
        if len(self.anchor) != n_coef:
            raise ValueError(
                f"anchor has {len(self.anchor)} entries, design has {n_coef} columns"
            )
        return np.asarray(self.anchor, dtype=float)


@dataclass(frozen=True)
class McmcSettings:
    """Sampler controls: chains, iterations per chain, burn-in, thinning."""

    chains: int = 2
    iterations: int = 10000
    burnin: int | None = None
    thin: int = 1
    psrf_threshold: float = 1.05

    def __post_init__(self) -> None:
        if self.chains < 2:
            raise ValueError("at least two chains are required for scale reduction")
        if self.iterations < 2:
            raise ValueError("iterations must be at least 2")
        burnin = self.iterations // 2 if self.burnin is None else int(self.burnin)
        if not 0 <= burnin < self.iterations:
            raise ValueError("burnin must satisfy 0 <= burnin < iterations")
        object.__setattr__(self, "burnin", burnin)
        if self.thin < 1:
            raise ValueError("thin must be a positive count")
        if self.psrf_threshold <= 1.0:
            raise ValueError("psrf_threshold must exceed 1")

    @property
    def kept_per_chain(self) -> int:
        return len(range(self.burnin, self.iterations, self.thin))


# ---------------------------------------------------------------------------
# result types


def _csv_num(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


@dataclass(frozen=True)
class ParamEstimate:
    """Point estimate with interval, scale reduction, and standard error."""

    name: str
    estimate: float
    lower: float | None = None
    upper: float | None = None
    rhat: float | None = None
    se: float | None = None

    @property
    def width(self) -> float | None:
        if self.lower is None or self.upper is None:
            return None
        return self.upper - self.lower

    @property
    def excludes_zero(self) -> bool | None:
        """Interval-based significance call; None when no interval exists."""
        if self.lower is None or self.upper is None:
            return None
        return self.lower > 0.0 or self.upper < 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "lower": self.lower,
            "upper": self.upper,
            "width": self.width,
            "rhat": self.rhat,
            "se": self.se,
        }


@dataclass(frozen=True)
class FitStats:
    """Posterior predictive p-value, its interval, and DIC with pD."""

    ppp: float
    dic: float
    p_d: float
    ppc_interval: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "ppp": self.ppp,
            "dic": self.dic,
            "pd": self.p_d,
            "ppc_interval": list(self.ppc_interval),
        }


@dataclass(frozen=True)
class FitResult:
    """One model fit: per-parameter rows plus fit-level diagnostics."""

    method: str
    params: tuple[ParamEstimate, ...]
    converged: bool
    stats: FitStats | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    def __getitem__(self, name: str) -> ParamEstimate:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(f"no parameter named {name!r}")

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "parameters": [p.to_dict() for p in self.params],
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv_rows(self) -> list[list[str]]:
        flag = "true" if self.converged else "false"
        return [
            [
                self.method,
                p.name,
                _csv_num(p.estimate),
                _csv_num(p.lower),
                _csv_num(p.upper),
                _csv_num(p.width),
                _csv_num(p.rhat),
                _csv_num(p.se),
                flag,
            ]
            for p in self.params
        ]

    def to_csv(self) -> str:
        lines = [",".join(RESULT_CSV_HEADER)]
        lines += [",".join(row) for row in self.to_csv_rows()]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GibbsDraws:
    """Pooled post-burn-in draws, chain-major order.

    ``beta`` is (n_draws, n_coef), ``u`` is (n_draws, n_clusters); the first
    ``n_draws / chains`` rows come from chain 0, and so on.
    """

    param_names: tuple[str, ...]
    beta: np.ndarray
    u: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    chains: int

    @property
    def n_draws(self) -> int:
        return self.sigma2.size

    def per_chain(self, values: np.ndarray) -> np.ndarray:
        """Reshape a pooled (n_draws, ...) array to (chains, kept, ...)."""
        return values.reshape(self.chains, -1, *values.shape[1:])


# ---------------------------------------------------------------------------
# diagnostics and summaries


def psrf(chains: Sequence[Sequence[float]] | np.ndarray) -> float:
    """Potential scale reduction for one scalar parameter.

    ``chains`` is (n_chains, n_draws).  Returns 1.0 when every chain is
    constant at the same value and +inf when chains are constant but
    disagree.
    """
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("psrf needs at least two chains of equal length")
    n = arr.shape[1]
    if n < 2:
        raise ValueError("psrf needs at least two draws per chain")
    within = float(np.mean(np.var(arr, axis=1, ddof=1)))
    means = np.mean(arr, axis=1)
    b_over_n = float(np.var(means, ddof=1))
    if within == 0.0:
        return 1.0 if b_over_n == 0.0 else math.inf
    var_plus = (n - 1) / n * within + b_over_n
    return math.sqrt(var_plus / within)


@dataclass(frozen=True)
class PosteriorSummary:
    median: float
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


def summarize(draws: Sequence[float] | np.ndarray, level: float = 0.95) -> PosteriorSummary:
    """Median and equal-tailed interval by linear order-statistic interpolation."""
    arr = np.asarray(draws, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("cannot summarize an empty draw sequence")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level!r}")
    tail = (1.0 - level) / 2.0
    med, lo, hi = np.quantile(arr, [0.5, tail, 1.0 - tail], method="linear")
    return PosteriorSummary(median=float(med), lower=float(lo), upper=float(hi))


# ---------------------------------------------------------------------------
# marginal likelihood and ML fit


def _cluster_sums(design: DesignMatrices, y: np.ndarray, n_clusters: int):
    x, cluster = design.x, design.cluster
    sx = np.column_stack(
        [np.bincount(cluster, weights=x[:, p], minlength=n_clusters) for p in range(x.shape[1])]
    )
    sy = np.bincount(cluster, weights=y, minlength=n_clusters)
    return sx, sy


def marginal_loglik(
    x: np.ndarray,
    y: np.ndarray,
    cluster: np.ndarray,
    beta: np.ndarray,
    sigma2: float,
    tau2: float,
) -> float:
    """Exact marginal log-likelihood of the random-intercept model.

    Uses the rank-one structure of each cluster block: the determinant and
    quadratic form reduce to per-cluster residual sums, so no N-by-N matrix
    is formed.
    """
    if sigma2 <= 0.0 or tau2 < 0.0:
        raise ValueError("sigma2 must be positive and tau2 nonnegative")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cluster = np.asarray(cluster)
    n = y.size
    n_clusters = int(cluster.max()) + 1
    sizes = np.bincount(cluster, minlength=n_clusters)
    resid = y - x @ np.asarray(beta, dtype=float)
    total_ss = float(resid @ resid)
    t = np.bincount(cluster, weights=resid, minlength=n_clusters)
    psi = sigma2 + sizes * tau2
    quad = (total_ss - tau2 * float(np.sum(t * t / psi))) / sigma2
    logdet = (n - n_clusters) * math.log(sigma2) + float(np.sum(np.log(psi)))
    return -0.5 * (n * math.log(2.0 * math.pi) + logdet + quad)


_TINY_VARIANCE = 1e-300


def ml_fit(data: TwoLevelDataset, formula: ModelFormula) -> FitResult:
    """Maximum likelihood via the profiled variance ratio.

    For lam = tau2/sigma2 fixed, GLS gives the coefficients and sigma2 in
    closed form; the profile likelihood is maximized over log(lam) with the
    lam = 0 boundary always considered.  tau2 = 0 at the optimum is reported,
    not treated as an error.
    """
    design = build_design(data, formula)
    x, y, cluster = design.x, data.y, design.cluster
    n, n_coef = x.shape
    n_clusters = data.n_clusters
    sizes = data.cluster_sizes.astype(float)
    gram = x.T @ x
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        raise EstimationError("singular fixed-effects design")
    xty = x.T @ y
    yty = float(y @ y)
    sx, sy = _cluster_sums(design, y, n_clusters)

    def profile(lam: float):
        shrink = lam / (1.0 + sizes * lam) if lam > 0.0 else np.zeros(n_clusters)
        a_mat = gram - sx.T @ (shrink[:, None] * sx)
        rhs = xty - sx.T @ (shrink * sy)
        beta = np.linalg.solve(a_mat, rhs)
        quad = yty - float(np.sum(shrink * sy * sy)) - float(beta @ rhs)
        sigma2 = max(quad / n, _TINY_VARIANCE)
        loglik = -0.5 * (
            n * math.log(2.0 * math.pi * sigma2)
            + float(np.sum(np.log1p(sizes * lam)))
            + n
        )
        return loglik, beta, sigma2, a_mat

    grid = np.linspace(-30.0, 30.0, 121)
    values = np.array([profile(math.exp(eta))[0] for eta in grid])
    best = int(np.argmax(values))
    span = grid[1] - grid[0]
    opt = minimize_scalar(
        lambda eta: -profile(math.exp(eta))[0],
        bounds=(grid[best] - 1.2 * span, grid[best] + 1.2 * span),
        method="bounded",
        options={"xatol": 1e-12},
    )
    lam_hat = math.exp(float(opt.x))
    ll_interior = -float(opt.fun)
    ll_boundary = profile(0.0)[0]
    if ll_boundary >= ll_interior:
        lam_hat = 0.0
    loglik, beta, sigma2, a_mat = profile(lam_hat)
    tau2 = lam_hat * sigma2
    cov = sigma2 * np.linalg.inv(a_mat)
    ses = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    warnings: list[str] = []
    converged = bool(opt.success) or lam_hat == 0.0
    y_scale = float(np.var(y)) if n > 1 else 0.0
    if sigma2 <= max(1e-12 * y_scale, 10.0 * _TINY_VARIANCE):
        warnings.append("degenerate: residual variance collapsed to the zero boundary")
        converged = False

    params = [
        ParamEstimate(
            name=name,
            estimate=float(beta[i]),
            lower=float(beta[i] - WALD_Z * ses[i]),
            upper=float(beta[i] + WALD_Z * ses[i]),
            se=float(ses[i]),
        )
        for i, name in enumerate(design.columns)
    ]
    params.append(ParamEstimate(name=INTERCEPT_VARIANCE, estimate=float(tau2)))
    params.append(ParamEstimate(name=RESIDUAL_VARIANCE, estimate=float(sigma2)))
    return FitResult(
        method="ml",
        params=tuple(params),
        converged=converged,
        stats=None,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Gibbs sampler


def _conditional_shapes(
    priors: PriorConfig, n: int, n_clusters: int
) -> tuple[float, float, float, float]:
    a_sig, b_sig = priors.l1_variance.shape_scale
    a_tau, b_tau = priors.l2_variance.shape_scale
    if priors.l1_variance.kind == "improper_flat" and n <= 2:
        raise EstimationError("improper flat residual-variance prior needs more than 2 rows")
    if priors.l2_variance.kind == "improper_flat" and n_clusters <= 2:
        raise EstimationError(
            "improper flat intercept-variance prior needs more than 2 clusters"
        )
    shape_sig = a_sig + 0.5 * n
    shape_tau = a_tau + 0.5 * n_clusters
    if shape_sig <= 0.0 or shape_tau <= 0.0:
        raise EstimationError("conditional inverse-gamma shape is not positive")
    return shape_sig, b_sig, shape_tau, b_tau


def _gibbs_core(
    data: TwoLevelDataset,
    formula: ModelFormula,
    configs: Sequence[PriorConfig],
    settings: McmcSettings,
    rngs: Sequence[np.random.Generator],
    ml_init: FitResult | None,
    freeze_beta: np.ndarray | None,
    freeze_u: np.ndarray | None,
) -> list[tuple[FitResult, GibbsDraws]]:
    """Shared sampler loop, vectorized over every (config, chain) pair.

    Each config owns one stream; its chains and fit-statistics draws come
    from that stream's spawned children in a fixed order, so a config's
    results are identical whether it runs alone or batched with others.
    """
    if len(configs) != len(rngs):
        raise ValueError("one stream per prior configuration is required")
    design = build_design(data, formula)
    x, y = design.x, data.y
    n, n_coef = x.shape
    n_clusters = data.n_clusters
    sizes = data.cluster_sizes.astype(float)
    prior_precision = 1.0 / COEF_PRIOR_VARIANCE

    n_cfg = len(configs)
    chains, iters = settings.chains, settings.iterations
    rows = n_cfg * chains
    shape_sig = np.empty(n_cfg)
    b_sig = np.empty(n_cfg)
    shape_tau = np.empty(n_cfg)
    b_tau = np.empty(n_cfg)
    anchors = np.empty((n_cfg, n_coef))
    for i, config in enumerate(configs):
        shape_sig[i], b_sig[i], shape_tau[i], b_tau[i] = _conditional_shapes(
            config, n, n_clusters
        )
        anchors[i] = config.anchor_vector(n_coef)

    gram = x.T @ x
    eigval, eigvec = np.linalg.eigh(gram)
    eigval = np.clip(eigval, 0.0, None)
    xty = x.T @ y
    yty = float(y @ y)
    sx, sy = _cluster_sums(design, y, n_clusters)

    ml = ml_init if ml_init is not None else ml_fit(data, formula)
    beta_hat = np.array([ml[name].estimate for name in design.columns])
    se_hat = np.array([ml[name].se or 0.0 for name in design.columns])
    y_scale = max(float(np.var(y)), 1e-12)
    sig2_center = max(ml[RESIDUAL_VARIANCE].estimate, 1e-6 * y_scale)
    tau2_center = max(ml[INTERCEPT_VARIANCE].estimate, 1e-3 * y_scale)

    keep_idx = np.arange(settings.burnin, iters, settings.thin)
    n_kept = keep_idx.size
    keep_slot = np.full(iters, -1, dtype=np.int64)
    keep_slot[keep_idx] = np.arange(n_kept)

    # Fixed per-chain draw protocol: 2 jitter normals, the initial-intercept
    # block, then all iteration normals and the two fixed-shape gamma runs.
    # Row layout is config-major, chain-minor.
    sig2 = np.empty(rows)
    tau2 = np.empty(rows)
    beta = np.empty((rows, n_coef))
    u = np.empty((rows, n_clusters))
    beta_norm = np.empty((iters, rows, n_coef))
    u_norm = np.empty((iters, rows, n_clusters))
    g_sig = np.empty((iters, rows))
    g_tau = np.empty((iters, rows))
    stats_streams = []
    row_b_sig = np.repeat(b_sig, chains)
    row_b_tau = np.repeat(b_tau, chains)
    row_anchor_term = prior_precision * np.repeat(anchors, chains, axis=0)
    for i, rng in enumerate(rngs):
        streams = rng.spawn(chains + 1)
        stats_streams.append(streams[chains])
        for c, stream in enumerate(streams[:chains]):
            r = i * chains + c
            z = stream.standard_normal(2)
            sig2[r] = sig2_center * math.exp(0.2 * z[0])
            tau2[r] = tau2_center * math.exp(0.2 * z[1])
            sign = 1.0 if c % 2 == 0 else -1.0
            beta[r] = beta_hat + sign * 2.0 * se_hat
            u_init = stream.standard_normal(n_clusters)
            t_res = sy - sx @ beta[r]
            denom = sizes * tau2[r] + sig2[r]
            u[r] = tau2[r] * t_res / denom + np.sqrt(tau2[r] * sig2[r] / denom) * u_init
            beta_norm[:, r, :] = stream.standard_normal((iters, n_coef))
            u_norm[:, r, :] = stream.standard_normal((iters, n_clusters))
            g_sig[:, r] = standard_gamma(stream, shape_sig[i], iters)
            g_tau[:, r] = standard_gamma(stream, shape_tau[i], iters)
    if freeze_beta is not None:
        beta[:] = np.asarray(freeze_beta, dtype=float)
    if freeze_u is not None:
        u[:] = np.asarray(freeze_u, dtype=float)

    beta_keep = np.empty((rows, n_kept, n_coef))
    u_keep = np.empty((rows, n_kept, n_clusters))
    sig2_keep = np.empty((rows, n_kept))
    tau2_keep = np.empty((rows, n_kept))
    sse_keep = np.empty((rows, n_kept))

    sxt = sx.T.copy()
    for t in range(iters):
        rhs = row_anchor_term + (xty[None, :] - u @ sx) / sig2[:, None]
        prec = prior_precision + eigval[None, :] / sig2[:, None]
        beta_rot = (rhs @ eigvec) / prec + beta_norm[t] / np.sqrt(prec)
        beta = beta_rot @ eigvec.T
        if freeze_beta is not None:
            beta[:] = freeze_beta
        t_res = sy[None, :] - beta @ sxt
        denom = sizes[None, :] * tau2[:, None] + sig2[:, None]
        u = tau2[:, None] * t_res / denom + np.sqrt(
            tau2[:, None] * sig2[:, None] / denom
        ) * u_norm[t]
        if freeze_u is not None:
            u[:] = freeze_u
        sse = (
            yty
            - 2.0 * beta @ xty
            + np.einsum("cp,pq,cq->c", beta, gram, beta)
            - 2.0 * np.sum(u * t_res, axis=1)
            + np.sum(sizes[None, :] * u * u, axis=1)
        )
        sig2 = (row_b_sig + 0.5 * sse) / g_sig[t]
        tau2 = (row_b_tau + 0.5 * np.sum(u * u, axis=1)) / g_tau[t]
        slot = keep_slot[t]
        if slot >= 0:
            beta_keep[:, slot, :] = beta
            u_keep[:, slot, :] = u
            sig2_keep[:, slot] = sig2
            tau2_keep[:, slot] = tau2
            sse_keep[:, slot] = sse

    names = list(design.columns) + [INTERCEPT_VARIANCE, RESIDUAL_VARIANCE]
    out: list[tuple[FitResult, GibbsDraws]] = []
    for i in range(n_cfg):
        block = slice(i * chains, (i + 1) * chains)
        result = _summaries_and_stats(
            names,
            beta_keep[block],
            u_keep[block],
            sig2_keep[block],
            tau2_keep[block],
            sse_keep[block],
            stats_streams[i],
            settings,
            n,
            n_coef,
            n_clusters,
            sizes,
            sx,
            sy,
            gram,
            xty,
            yty,
        )
        out.append(result)
    return out


def _summaries_and_stats(
    names,
    beta_keep,
    u_keep,
    sig2_keep,
    tau2_keep,
    sse_keep,
    stats_stream,
    settings,
    n,
    n_coef,
    n_clusters,
    sizes,
    sx,
    sy,
    gram,
    xty,
    yty,
) -> tuple[FitResult, GibbsDraws]:
    chains, n_kept = sig2_keep.shape
    pooled_beta = beta_keep.reshape(chains * n_kept, n_coef)
    pooled_u = u_keep.reshape(chains * n_kept, n_clusters)
    pooled_sig2 = sig2_keep.ravel()
    pooled_tau2 = tau2_keep.ravel()
    pooled_sse = sse_keep.ravel()

    per_chain = [beta_keep[:, :, i] for i in range(n_coef)] + [tau2_keep, sig2_keep]
    pooled = [pooled_beta[:, i] for i in range(n_coef)] + [pooled_tau2, pooled_sig2]
    params = []
    rhats = []
    for name, chain_draws, all_draws in zip(names, per_chain, pooled):
        stat = summarize(all_draws, 0.95)
        rhat = psrf(chain_draws)
        rhats.append(rhat)
        params.append(
            ParamEstimate(
                name=name,
                estimate=stat.median,
                lower=stat.lower,
                upper=stat.upper,
                rhat=rhat,
                se=float(np.std(all_draws, ddof=1)),
            )
        )
    converged = all(r <= settings.psrf_threshold for r in rhats)

    # Replicated-data discrepancy: with the conditional deviance as the
    # discrepancy, D_rep - D_obs reduces to a chi-square(N) draw minus
    # SSE/sigma2, so no replicated outcome vector is needed here.
    obs_ratio = pooled_sse / pooled_sig2
    chi = stats_stream.chisquare(df=n, size=(chains, n_kept)).ravel()
    ppp = float(np.mean(chi > obs_ratio))
    diff = obs_ratio - chi
    diff_summary = summarize(diff, 0.95)
    log_term = n * np.log(2.0 * math.pi * pooled_sig2)
    mean_dev = float(np.mean(log_term + obs_ratio))
    beta_bar = pooled_beta.mean(axis=0)
    u_bar = pooled_u.mean(axis=0)
    sig2_bar = float(np.mean(pooled_sig2))
    t_bar = sy - sx @ beta_bar
    sse_bar = (
        yty
        - 2.0 * float(beta_bar @ xty)
        + float(beta_bar @ gram @ beta_bar)
        - 2.0 * float(u_bar @ t_bar)
        + float(np.sum(sizes * u_bar * u_bar))
    )
    dev_at_mean = n * math.log(2.0 * math.pi * sig2_bar) + sse_bar / sig2_bar
    p_d = mean_dev - dev_at_mean
    stats = FitStats(
        ppp=ppp,
        dic=mean_dev + p_d,
        p_d=p_d,
        ppc_interval=(diff_summary.lower, diff_summary.upper),
    )
    result = FitResult(
        method="gibbs",
        params=tuple(params),
        converged=converged,
        stats=stats,
        warnings=(),
    )
    draws = GibbsDraws(
        param_names=tuple(names),
        beta=pooled_beta,
        u=pooled_u,
        sigma2=pooled_sig2,
        tau2=pooled_tau2,
        chains=chains,
    )
    return result, draws


def gibbs_fit(
    data: TwoLevelDataset,
    formula: ModelFormula,
    priors: PriorConfig,
    settings: McmcSettings,
    rng: np.random.Generator,
    return_draws: bool = False,
    _ml_init: FitResult | None = None,
    _freeze_beta: np.ndarray | None = None,
    _freeze_u: np.ndarray | None = None,
):
    """Blocked conjugate Gibbs sampler for the random-intercept model.

    Cycle order per iteration: coefficients, cluster intercepts, residual
    variance, intercept variance.  Chains start at maximum-likelihood
    estimates, jittered on the variance scale and offset by two standard
    errors on the coefficients, and each chain consumes an independently
    spawned stream in a fixed order, so results do not depend on how chains
    are scheduled.  Per-chain draws are pooled chain-major for summaries.

    The ``_freeze_*`` hooks pin a block at fixed values (the draw is made and
    discarded) so the remaining conditionals can be checked against their
    analytic forms.
    """
    pairs = _gibbs_core(
        data,
        formula,
        [priors],
        settings,
        [rng],
        _ml_init,
        None if _freeze_beta is None else np.asarray(_freeze_beta, dtype=float),
        None if _freeze_u is None else np.asarray(_freeze_u, dtype=float),
    )
    result, draws = pairs[0]
    return (result, draws) if return_draws else result


def gibbs_fit_multi(
    data: TwoLevelDataset,
    formula: ModelFormula,
    configs: Sequence[PriorConfig],
    settings: McmcSettings,
    rngs: Sequence[np.random.Generator],
    _ml_init: FitResult | None = None,
) -> list[FitResult]:
    """Run several prior configurations on one dataset in a single pass.

    Equivalent to calling ``gibbs_fit`` once per config with the matching
    stream; batching them shares the per-iteration work across configs.
    """
    pairs = _gibbs_core(data, formula, list(configs), settings, list(rngs), _ml_init, None, None)
    return [result for result, _ in pairs]


def fit_stats(
    draws: GibbsDraws,
    data: TwoLevelDataset,
    formula: ModelFormula,
    rng: np.random.Generator | None = None,
) -> FitStats:
    """Fit statistics by literal posterior-predictive replication.

    For every retained draw, simulates a replicated outcome vector and
    compares conditional deviances.  ``gibbs_fit`` computes the same
    quantities through the chi-square reduction; this standalone version is
    the direct definition.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    design = build_design(data, formula)
    x, y, cluster = design.x, data.y, design.cluster
    n = y.size
    n_draws = draws.n_draws
    d_obs = np.empty(n_draws)
    d_rep = np.empty(n_draws)
    chunk = 128
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        mu = draws.beta[start:stop] @ x.T + draws.u[start:stop][:, cluster]
        sig2 = draws.sigma2[start:stop]
        sd = np.sqrt(sig2)[:, None]
        resid = y[None, :] - mu
        sse_obs = np.sum(resid * resid, axis=1)
        rep_resid = sd * rng.standard_normal(mu.shape)
        sse_rep = np.sum(rep_resid * rep_resid, axis=1)
        log_term = n * np.log(2.0 * math.pi * sig2)
        d_obs[start:stop] = log_term + sse_obs / sig2
        d_rep[start:stop] = log_term + sse_rep / sig2
    ppp = float(np.mean(d_rep > d_obs))
    diff_summary = summarize(d_obs - d_rep, 0.95)
    beta_bar = draws.beta.mean(axis=0)
    u_bar = draws.u.mean(axis=0)
    sig2_bar = float(np.mean(draws.sigma2))
    mu_bar = x @ beta_bar + u_bar[cluster]
    sse_bar = float(np.sum((y - mu_bar) ** 2))
    dev_at_mean = n * math.log(2.0 * math.pi * sig2_bar) + sse_bar / sig2_bar
    mean_dev = float(np.mean(d_obs))
    p_d = mean_dev - dev_at_mean
    return FitStats(
        ppp=ppp,
        dic=mean_dev + p_d,
        p_d=p_d,
        ppc_interval=(diff_summary.lower, diff_summary.upper),
    )
