"""Monte Carlo study engine.

Runs the factor grid (cluster count, cluster size, ICC, per-level R2),
replicating each cell and fitting every requested regime on the same
dataset.  Seven regimes are defined: maximum likelihood plus six Bayesian
prior configurations crossing the coefficient prior (flat vs centered at the
generating values) with the variance prior (improper flat, weak IG(.01,.01),
or mode-matched IG anchored at the true component).

Randomness is derived per (cell, replicate, regime) from the master seed, so
results are identical no matter how work is scheduled across processes.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .distributions import InverseGammaPrior
from .estimators import (
    EstimationError,
    FitResult,
    INTERCEPT_VARIANCE,
    McmcSettings,
    PriorConfig,
    RESIDUAL_VARIANCE,
    VariancePrior,
    gibbs_fit,
    gibbs_fit_multi,
    ml_fit,
)
from .model import ConditionSpec, ModelFormula, TrueParams, generate, solve_condition
from .priors import mode_matched_ig, perturb_strength

__all__ = [
    "REGIMES",
    "DEFAULT_SEED",
    "StudyPlan",
    "MetricRow",
    "MetricSummary",
    "CellMetrics",
    "ReplicateRecord",
    "TwoStageRule",
    "SensitivityRow",
    "METRICS_CSV_HEADER",
    "regime_prior_config",
    "truth_values",
    "compute_metrics",
    "run_replicate",
    "run_cell",
    "run_grid",
    "two_stage_cell",
    "sensitivity_sweep",
    "sensitivity_to_csv",
    "write_metrics_csv",
    "write_replicates_csv",
    "resolve_workers",
    "WORKERS_ENV_VAR",
]

# Canonical regime order; seeding and cross-run identity key off these
# positions, so the tuple must never be reordered.
REGIMES = (
    "ml",
    "flat",
    "anchored_coef",
    "weak_var",
    "mode_var",
    "anchored_coef_weak_var",
    "anchored_coef_mode_var",
)

DEFAULT_SEED = 271828
WORKERS_ENV_VAR = "MODEMATCH_WORKERS"

# stream slot used by the second pass of the two-stage workflow (slots 0 and
# 1..len(REGIMES) belong to data generation and the standard regimes)
_TWO_STAGE_SLOT = 1 + len(REGIMES)

METRICS_CSV_HEADER = (
    "cell_id",
    "n_clusters",
    "cluster_size",
    "icc",
    "r2_within",
    "r2_between",
    "regime",
    "parameter",
    "metric",
    "value",
)

REPLICATES_CSV_HEADER = (
    "rep",
    "method",
    "parameter",
    "estimate",
    "lower",
    "upper",
    "width",
    "rhat",
    "se",
    "converged",
    "error",
)


@dataclass(frozen=True)
class StudyPlan:
    """Full study description: grid, replication count, regimes, sampler."""

    j_levels: tuple[int, ...] = (10, 30, 100)
    m_levels: tuple[int, ...] = (5, 30)
    icc_levels: tuple[float, ...] = (0.01, 0.20, 0.40)
    r2w_levels: tuple[float, ...] = (0.0, 0.20, 0.50)
    r2b_levels: tuple[float, ...] = (0.0, 0.20, 0.50)
    replications: int = 200
    v_tot: float = 1.0
    regimes: tuple[str, ...] = REGIMES
    mcmc: McmcSettings = field(
        default_factory=lambda: McmcSettings(chains=2, iterations=5000, burnin=2500, thin=1)
    )
    seed: int = DEFAULT_SEED
    l2_strength_df: float | None = None
    l1_strength_df: float | None = None

    def __post_init__(self) -> None:
        for name in ("j_levels", "m_levels", "icc_levels", "r2w_levels", "r2b_levels"):
            levels = tuple(getattr(self, name))
            if not levels:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, levels)
        if self.replications < 0:
            raise ValueError("replications must be nonnegative")
        object.__setattr__(self, "regimes", tuple(self.regimes))
        unknown = [r for r in self.regimes if r not in REGIMES]
        if unknown:
            raise ValueError(f"unknown regimes {unknown}; valid regimes are {list(REGIMES)}")
        if not self.regimes:
            raise ValueError("at least one regime is required")

    def cells(self) -> list[tuple[int, ConditionSpec]]:
        """Cells in deterministic order: the factor product, row-major."""
        out = []
        combos = itertools.product(
            self.j_levels, self.m_levels, self.icc_levels, self.r2w_levels, self.r2b_levels
        )
        for index, (j, m, icc, r2w, r2b) in enumerate(combos):
            out.append(
                (
                    index,
                    ConditionSpec(
                        n_clusters=j,
                        cluster_size=m,
                        icc=icc,
                        r2_within=r2w,
                        r2_between=r2b,
                        total_variance=self.v_tot,
                    ),
                )
            )
        return out

    def to_dict(self) -> dict:
        return {
            "grid": {
                "J": list(self.j_levels),
                "M": list(self.m_levels),
                "icc": list(self.icc_levels),
                "r2w": list(self.r2w_levels),
                "r2b": list(self.r2b_levels),
            },
            "replications": self.replications,
            "v_tot": self.v_tot,
            "regimes": list(self.regimes),
            "mcmc": {
                "chains": self.mcmc.chains,
                "iterations": self.mcmc.iterations,
                "burnin": self.mcmc.burnin,
                "thin": self.mcmc.thin,
            },
            "seed": self.seed,
            "l2_strength_df": self.l2_strength_df,
            "l1_strength_df": self.l1_strength_df,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "StudyPlan":
        if not isinstance(data, dict):
            raise ValueError("plan must be a JSON object")
        allowed = {
            "grid",
            "replications",
            "v_tot",
            "regimes",
            "mcmc",
            "seed",
            "l2_strength_df",
            "l1_strength_df",
        }
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        kwargs: dict = {}
        grid = data.get("grid", {})
        grid_keys = {"J": "j_levels", "M": "m_levels", "icc": "icc_levels",
                     "r2w": "r2w_levels", "r2b": "r2b_levels"}
        unknown_grid = set(grid) - set(grid_keys)
        if unknown_grid:
            raise ValueError(f"unknown grid keys {sorted(unknown_grid)}")
        for key, attr in grid_keys.items():
            if key in grid:
                kwargs[attr] = tuple(grid[key])
        for key in ("replications", "v_tot", "seed", "l2_strength_df", "l1_strength_df"):
            if key in data and data[key] is not None:
                kwargs[key] = data[key]
        if "regimes" in data:
            kwargs["regimes"] = tuple(data["regimes"])
        if "mcmc" in data:
            mc = dict(data["mcmc"])
            unknown_mc = set(mc) - {"chains", "iterations", "burnin", "thin", "psrf_threshold"}
            if unknown_mc:
                raise ValueError(f"unknown mcmc keys {sorted(unknown_mc)}")
            kwargs["mcmc"] = McmcSettings(**mc)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "StudyPlan":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"plan is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def cell_id(spec: ConditionSpec) -> str:
    return (
        f"J{spec.n_clusters}_M{spec.cluster_size}_icc{spec.icc:.2f}"
        f"_r2w{spec.r2_within:.2f}_r2b{spec.r2_between:.2f}"
    )


def truth_values(params: TrueParams, formula: ModelFormula) -> dict[str, float]:
    """Map generating values onto result parameter names, in result order."""
    if len(formula.l1) != 2 or len(formula.l2) != 2 or formula.interactions:
        raise ValueError("the study formula uses exactly two predictors per level")
    out = {"intercept": params.grand_mean}
    for name, value in zip(formula.l1, params.within_slopes):
        out[name] = value
    for name, value in zip(formula.l2, params.between_slopes):
        out[name] = value
    out[INTERCEPT_VARIANCE] = params.tau2
    out[RESIDUAL_VARIANCE] = params.sigma2
    return out


def _strength_shapes(
    spec: ConditionSpec, l2_strength_df: float | None, l1_strength_df: float | None
) -> tuple[float, float]:
    # Default prior strength mirrors what the data themselves could supply:
    # J cluster-level observations for tau2 and the residual degrees of
    # freedom (N - J - 2 predictors) for sigma2.
    l2_df = float(l2_strength_df) if l2_strength_df is not None else float(spec.n_clusters)
    l1_df = (
        float(l1_strength_df)
        if l1_strength_df is not None
        else float(spec.n_rows - spec.n_clusters - 2)
    )
    return l2_df / 2.0, l1_df / 2.0


def regime_prior_config(
    regime: str,
    truth: TrueParams,
    spec: ConditionSpec,
    l2_strength_df: float | None = None,
    l1_strength_df: float | None = None,
) -> PriorConfig:
    """Prior configuration for one Bayesian regime.

    Anchored regimes center the coefficient prior at the generating values
    (design order: intercept, within slopes, between slopes); mode-matched
    regimes anchor each variance prior's mode at the true component.
    """
    if regime not in REGIMES or regime == "ml":
        raise ValueError(f"no prior configuration for regime {regime!r}")
    anchored = regime.startswith("anchored_coef")
    if regime in ("flat", "anchored_coef"):
        l1_var = VariancePrior.improper_flat()
        l2_var = VariancePrior.improper_flat()
    elif regime.endswith("weak_var"):
        l1_var = VariancePrior.weak()
        l2_var = VariancePrior.weak()
    else:
        a_tau, a_sigma = _strength_shapes(spec, l2_strength_df, l1_strength_df)
        l2_var = VariancePrior.mode_matched(mode_matched_ig(truth.tau2, a_tau))
        l1_var = VariancePrior.mode_matched(mode_matched_ig(truth.sigma2, a_sigma))
    if anchored:
        anchor = (truth.grand_mean, *truth.within_slopes, *truth.between_slopes)
        return PriorConfig(
            coef_prior="centered_weak", anchor=anchor, l1_variance=l1_var, l2_variance=l2_var
        )
    return PriorConfig(coef_prior="flat_default", l1_variance=l1_var, l2_variance=l2_var)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricSummary:
    """Replicate-level metrics for one parameter under one regime."""

    n: int
    bias: float
    rmse: float
    coverage: float | None
    exclusion_rate: float | None
    mean_width: float | None


def compute_metrics(
    estimates: Sequence[float],
    truths: Sequence[float],
    intervals: Sequence[tuple[float, float]] | None = None,
) -> MetricSummary:
    """Bias, RMSE, and interval-based rates over aligned replicate vectors.

    ``exclusion_rate`` is the fraction of intervals excluding zero — the
    false-positive rate when the true value is zero, power otherwise.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimates and truths must have equal length")
    n = est.size
    if n == 0:
        return MetricSummary(0, math.nan, math.nan, None, None, None)
    err = est - tru
    bias = float(np.mean(err))
    rmse = float(np.sqrt(np.mean(err * err)))
    if intervals is None:
        return MetricSummary(n, bias, rmse, None, None, None)
    ivl = np.asarray(intervals, dtype=float)
    if ivl.shape != (n, 2):
        raise ValueError("intervals must align with estimates as (n, 2)")
    lower, upper = ivl[:, 0], ivl[:, 1]
    coverage = float(np.mean((lower <= tru) & (tru <= upper)))
    exclusion = float(np.mean((lower > 0.0) | (upper < 0.0)))
    width = float(np.mean(upper - lower))
    return MetricSummary(n, bias, rmse, coverage, exclusion, width)


@dataclass(frozen=True)
class MetricRow:
    regime: str
    parameter: str
    metric: str
    value: float


@dataclass(frozen=True)
class CellMetrics:
    """All metric rows for one cell, plus the generating truth."""

    cell_id: str
    spec: ConditionSpec
    truth: dict[str, float]
    rows: tuple[MetricRow, ...]

    def value(self, regime: str, parameter: str, metric: str) -> float:
        for row in self.rows:
            if (row.regime, row.parameter, row.metric) == (regime, parameter, metric):
                return row.value
        raise KeyError(f"no metric ({regime}, {parameter}, {metric})")


@dataclass(frozen=True)
class ReplicateRecord:
    """Outcome of one regime on one replicate; ``result`` is None on failure."""

    rep: int
    regime: str
    result: FitResult | None
    error: str | None = None


def _aggregate_records(
    spec: ConditionSpec,
    truth: dict[str, float],
    records: Sequence[ReplicateRecord],
    regimes: Sequence[str],
    n_reps: int,
    extra_rows: Sequence[MetricRow] = (),
) -> CellMetrics:
    rows: list[MetricRow] = []
    for name, value in truth.items():
        rows.append(MetricRow("truth", name, "true_value", value))
    for regime in regimes:
        fits = [r.result for r in records if r.regime == regime and r.result is not None]
        n_attempted = sum(1 for r in records if r.regime == regime)
        converged = sum(1 for f in fits if f.converged)
        conv_rate = converged / n_attempted if n_attempted else math.nan
        for parameter in truth:
            ests = [f[parameter].estimate for f in fits]
            tru = [truth[parameter]] * len(ests)
            has_intervals = bool(fits) and all(
                f[parameter].lower is not None and f[parameter].upper is not None
                for f in fits
            )
            intervals = (
                [(f[parameter].lower, f[parameter].upper) for f in fits]
                if has_intervals
                else None
            )
            summary = compute_metrics(ests, tru, intervals)
            if summary.n == 0:
                continue
            rows.append(MetricRow(regime, parameter, "bias", summary.bias))
            rows.append(MetricRow(regime, parameter, "rmse", summary.rmse))
            if intervals is not None:
                rows.append(MetricRow(regime, parameter, "coverage", summary.coverage))
                rate_name = "fpr" if truth[parameter] == 0.0 else "power"
                rows.append(MetricRow(regime, parameter, rate_name, summary.exclusion_rate))
                rows.append(MetricRow(regime, parameter, "mean_width", summary.mean_width))
            rows.append(MetricRow(regime, parameter, "convergence_rate", conv_rate))
    rows.extend(extra_rows)
    _ = n_reps
    return CellMetrics(cell_id=cell_id(spec), spec=spec, truth=truth, rows=tuple(rows))


# ---------------------------------------------------------------------------
# replication loop


def _data_stream(seed: int, cell_index: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell_index, rep, 0)))


def _fit_stream(seed: int, cell_index: int, rep: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(cell_index, rep, slot))
    )


def run_replicate(
    plan: StudyPlan, spec: ConditionSpec, cell_index: int, rep: int
) -> list[ReplicateRecord]:
    """Generate one dataset and run every requested regime on it.

    The Bayesian regimes are batched through one sampler pass; each still
    consumes its own stream, so the rows match one-at-a-time fits.  If the
    batch fails, regimes are retried individually so the error lands only on
    the regime that caused it.
    """
    formula = ModelFormula.simulation_default()
    params = solve_condition(spec)
    data = generate(spec, params, _data_stream(plan.seed, cell_index, rep))
    caught = (EstimationError, np.linalg.LinAlgError)
    try:
        ml_result: FitResult | None = ml_fit(data, formula)
        ml_error = ""
    except caught as exc:
        ml_result, ml_error = None, str(exc)

    by_regime: dict[str, ReplicateRecord] = {}
    if "ml" in plan.regimes:
        if ml_result is not None:
            by_regime["ml"] = ReplicateRecord(rep, "ml", replace(ml_result, method="ml"))
        else:
            by_regime["ml"] = ReplicateRecord(rep, "ml", None, ml_error)
    gibbs_regimes = [r for r in plan.regimes if r != "ml"]
    if gibbs_regimes and ml_result is None:
        # Chain starts come from the ML fit, so its failure fails every regime.
        for regime in gibbs_regimes:
            by_regime[regime] = ReplicateRecord(rep, regime, None, ml_error)
    elif gibbs_regimes:
        configs = [
            regime_prior_config(
                regime, params, spec, plan.l2_strength_df, plan.l1_strength_df
            )
            for regime in gibbs_regimes
        ]
        streams = [
            _fit_stream(plan.seed, cell_index, rep, 1 + REGIMES.index(regime))
            for regime in gibbs_regimes
        ]
        try:
            results = gibbs_fit_multi(
                data, formula, configs, plan.mcmc, streams, _ml_init=ml_result
            )
            for regime, result in zip(gibbs_regimes, results):
                by_regime[regime] = ReplicateRecord(
                    rep, regime, replace(result, method=regime)
                )
        except caught:
            for regime, config in zip(gibbs_regimes, configs):
                stream = _fit_stream(plan.seed, cell_index, rep, 1 + REGIMES.index(regime))
                try:
                    result = gibbs_fit(
                        data, formula, config, plan.mcmc, stream, _ml_init=ml_result
                    )
                    by_regime[regime] = ReplicateRecord(
                        rep, regime, replace(result, method=regime)
                    )
                except caught as exc:
                    by_regime[regime] = ReplicateRecord(rep, regime, None, str(exc))
    return [by_regime[regime] for regime in plan.regimes]


def _replicate_task(
    plan: StudyPlan, spec: ConditionSpec, cell_index: int, start: int, stop: int
) -> tuple[int, int, list[ReplicateRecord]]:
    records: list[ReplicateRecord] = []
    for rep in range(start, stop):
        records.extend(run_replicate(plan, spec, cell_index, rep))
    return cell_index, start, records


def run_cell(spec: ConditionSpec, plan: StudyPlan, cell_index: int = 0) -> CellMetrics:
    """Run one cell sequentially and aggregate its metrics."""
    records: list[ReplicateRecord] = []
    for rep in range(plan.replications):
        records.extend(run_replicate(plan, spec, cell_index, rep))
    params = solve_condition(spec)
    truth = truth_values(params, ModelFormula.simulation_default())
    return _aggregate_records(spec, truth, records, plan.regimes, plan.replications)


def resolve_workers(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"{WORKERS_ENV_VAR} must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def run_grid(
    plan: StudyPlan,
    out_dir: str | Path | None = None,
    workers: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[CellMetrics]:
    """Run every cell of the plan, optionally writing outputs as cells finish.

    Work is split into replicate chunks; every chunk reseeds itself from
    (master seed, cell index, replicate), and records are merged in sorted
    replicate order, so the worker count cannot change any output.  With an
    ``out_dir``, each finished cell flushes ``cells/<id>/replicates.csv`` and
    the cumulative ``metrics.csv`` immediately, leaving usable partial
    results on interruption.
    """
    cells = plan.cells()
    n_workers = resolve_workers(workers)
    out_path = Path(out_dir) if out_dir is not None else None
    chunk = 25
    tasks = []
    for index, spec in cells:
        starts = range(0, plan.replications, chunk) if plan.replications else []
        for start in starts:
            tasks.append((index, spec, start, min(start + chunk, plan.replications)))

    chunks_by_cell: dict[int, dict[int, list[ReplicateRecord]]] = {i: {} for i, _ in cells}
    expected = {
        i: len(range(0, plan.replications, chunk)) if plan.replications else 0
        for i, _ in cells
    }
    done: dict[int, CellMetrics] = {}

    def finish_cell(index: int, spec: ConditionSpec) -> None:
        parts = chunks_by_cell.pop(index)
        records: list[ReplicateRecord] = []
        for start in sorted(parts):
            records.extend(parts[start])
        params = solve_condition(spec)
        truth = truth_values(params, ModelFormula.simulation_default())
        metrics = _aggregate_records(spec, truth, records, plan.regimes, plan.replications)
        done[index] = metrics
        if out_path is not None:
            cell_dir = out_path / "cells" / metrics.cell_id
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_replicates_csv(cell_dir / "replicates.csv", records)
            ordered = [done[i] for i, _ in cells if i in done]
            write_metrics_csv(
                out_path / "metrics.csv",
                ordered,
                include_marginals=len(done) == len(cells) and len(cells) > 1,
            )
        if progress is not None:
            progress(f"cell {metrics.cell_id} done ({len(done)}/{len(cells)})")

    if n_workers == 1 or len(tasks) <= 1:
        for index, spec, start, stop in tasks:
            _, _, records = _replicate_task(plan, spec, index, start, stop)
            chunks_by_cell[index][start] = records
        for index, spec in cells:
            if expected[index] == len(chunks_by_cell.get(index, {})):
                finish_cell(index, spec)
    else:
        spec_by_index = dict(cells)
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_replicate_task, plan, spec, index, start, stop)
                for index, spec, start, stop in tasks
            ]
            for future in as_completed(futures):
                index, start, records = future.result()
                chunks_by_cell[index][start] = records
                if len(chunks_by_cell[index]) == expected[index]:
                    finish_cell(index, spec_by_index[index])

    # zero-replication plans produce empty cells with truth rows only
    for index, spec in cells:
        if index not in done and expected[index] == 0:
            finish_cell(index, spec)
    return [done[i] for i, _ in cells]


# ---------------------------------------------------------------------------
# two-stage workflow


@dataclass(frozen=True)
class TwoStageRule:
    """Strength of the stage-2 mode-matched priors, as IG shapes.

    Defaults scale with the data: (J - 1) / 4 for the intercept variance and
    the residual df over 4 for the residual variance.  These sit well below
    the one-stage defaults because stage 2 reuses the same data that set the
    prior's location.
    """

    a_tau: float | None = None
    a_sigma: float | None = None

    def resolve(self, spec: ConditionSpec) -> tuple[float, float]:
        a_tau = self.a_tau if self.a_tau is not None else (spec.n_clusters - 1) / 4.0
        a_sigma = (
            self.a_sigma
            if self.a_sigma is not None
            else (spec.n_rows - spec.n_clusters - 2) / 4.0
        )
        if a_tau <= 0.0 or a_sigma <= 0.0:
            raise ValueError("two-stage prior shapes must be positive")
        return float(a_tau), float(a_sigma)


def two_stage_cell(
    spec: ConditionSpec,
    rule: TwoStageRule,
    plan: StudyPlan,
    cell_index: int = 0,
    records_out: list[ReplicateRecord] | None = None,
) -> CellMetrics:
    """Flat-prior first pass, then refit with mode-matched priors at the
    stage-1 posterior variance medians.

    Metrics are reported for stage 2 (regime ``two_stage``) together with the
    stage-2 / stage-1 mean-interval-width ratio per parameter.  Replicates
    whose first pass does not converge are skipped and recorded as
    unconverged stage-2 attempts.
    """
    formula = ModelFormula.simulation_default()
    params = solve_condition(spec)
    truth = truth_values(params, formula)
    a_tau, a_sigma = rule.resolve(spec)
    records: list[ReplicateRecord] = []
    width1: dict[str, list[float]] = {name: [] for name in truth}
    width2: dict[str, list[float]] = {name: [] for name in truth}
    for rep in range(plan.replications):
        data = generate(spec, params, _data_stream(plan.seed, cell_index, rep))
        stage1_slot = 1 + REGIMES.index("flat")
        try:
            stage1 = gibbs_fit(
                data,
                formula,
                regime_prior_config("flat", params, spec),
                plan.mcmc,
                _fit_stream(plan.seed, cell_index, rep, stage1_slot),
            )
        except (EstimationError, np.linalg.LinAlgError) as exc:
            records.append(ReplicateRecord(rep, "flat", None, str(exc)))
            records.append(ReplicateRecord(rep, "two_stage", None, "stage 1 failed"))
            continue
        records.append(ReplicateRecord(rep, "flat", replace(stage1, method="flat")))
        if not stage1.converged:
            records.append(
                ReplicateRecord(rep, "two_stage", None, "stage 1 did not converge")
            )
            continue
        config = PriorConfig(
            coef_prior="flat_default",
            l1_variance=VariancePrior.mode_matched(
                mode_matched_ig(stage1[RESIDUAL_VARIANCE].estimate, a_sigma)
            ),
            l2_variance=VariancePrior.mode_matched(
                mode_matched_ig(stage1[INTERCEPT_VARIANCE].estimate, a_tau)
            ),
        )
        stage2 = gibbs_fit(
            data,
            formula,
            config,
            plan.mcmc,
            _fit_stream(plan.seed, cell_index, rep, _TWO_STAGE_SLOT),
        )
        records.append(ReplicateRecord(rep, "two_stage", replace(stage2, method="two_stage")))
        for name in truth:
            w1, w2 = stage1[name].width, stage2[name].width
            if w1 is not None and w2 is not None:
                width1[name].append(w1)
                width2[name].append(w2)
    ratio_rows = [
        MetricRow(
            "two_stage",
            name,
            "width_ratio_vs_stage1",
            float(np.mean(width2[name]) / np.mean(width1[name])),
        )
        for name in truth
        if width1[name]
    ]
    if records_out is not None:
        records_out.extend(records)
    return _aggregate_records(
        spec, truth, records, ("flat", "two_stage"), plan.replications, ratio_rows
    )


# ---------------------------------------------------------------------------
# sensitivity sweep


@dataclass(frozen=True)
class SensitivityRow:
    factor: float
    parameter: str
    median: float
    lower: float
    upper: float
    width: float
    rhat: float
    median_shift: float
    width_shift: float


def sensitivity_sweep(
    data,
    formula: ModelFormula,
    l2_prior: InverseGammaPrior,
    l1_prior: InverseGammaPrior,
    l2_mode: float,
    l1_mode: float,
    settings: McmcSettings,
    seed: int = DEFAULT_SEED,
    factors: Sequence[float] = (0.75, 1.0, 1.25),
) -> list[SensitivityRow]:
    """Refit under strength-perturbed variance priors and report shifts.

    Every factor multiplies both prior shapes, rescaling each scale to keep
    the mode pinned; all fits reuse one stream so the factor-1.0 row
    reproduces the baseline exactly.  Shifts are relative to the baseline
    median/width (absolute when the baseline is zero).
    """
    factors = tuple(float(f) for f in factors)
    if 1.0 not in factors:
        factors = (1.0,) + factors
    results: dict[float, FitResult] = {}
    for factor in factors:
        config = PriorConfig(
            coef_prior="flat_default",
            l1_variance=VariancePrior.mode_matched(
                perturb_strength(l1_prior, l1_mode, factor)
            ),
            l2_variance=VariancePrior.mode_matched(
                perturb_strength(l2_prior, l2_mode, factor)
            ),
        )
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        results[factor] = gibbs_fit(data, formula, config, settings, rng)
    base = results[1.0]
    rows: list[SensitivityRow] = []
    for factor in sorted(results):
        fit = results[factor]
        for est in fit.params:
            ref = base[est.name]
            med_shift = (
                (est.estimate - ref.estimate) / abs(ref.estimate)
                if ref.estimate != 0.0
                else est.estimate - ref.estimate
            )
            ref_width = ref.width or 0.0
            width = est.width or 0.0
            width_shift = (
                (width - ref_width) / ref_width if ref_width else width - ref_width
            )
            rows.append(
                SensitivityRow(
                    factor=factor,
                    parameter=est.name,
                    median=est.estimate,
                    lower=est.lower if est.lower is not None else math.nan,
                    upper=est.upper if est.upper is not None else math.nan,
                    width=width,
                    rhat=est.rhat if est.rhat is not None else math.nan,
                    median_shift=med_shift,
                    width_shift=width_shift,
                )
            )
    return rows


def sensitivity_to_csv(rows: Sequence[SensitivityRow]) -> str:
    header = "factor,parameter,median,lower,upper,width,rhat,median_shift,width_shift"
    lines = [header]
    for r in rows:
        lines.append(
            f"{_fmt(r.factor)},{r.parameter},{_fmt(r.median)},{_fmt(r.lower)},"
            f"{_fmt(r.upper)},{_fmt(r.width)},{_fmt(r.rhat)},{_fmt(r.median_shift)},"
            f"{_fmt(r.width_shift)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV output


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value:.6g}"


def metrics_rows(cell: CellMetrics) -> list[list[str]]:
    spec = cell.spec
    prefix = [
        cell.cell_id,
        str(spec.n_clusters),
        str(spec.cluster_size),
        _fmt(spec.icc),
        _fmt(spec.r2_within),
        _fmt(spec.r2_between),
    ]
    return [
        prefix + [row.regime, row.parameter, row.metric, _fmt(row.value)]
        for row in cell.rows
    ]


def _marginal_rows(cells: Sequence[CellMetrics]) -> list[list[str]]:
    """Unweighted cell averages, collapsed one factor at a time plus a total.

    The truth rows are excluded: averaging generating values across cells
    has no meaning.
    """
    factors = [
        ("n_clusters", lambda s: s.n_clusters, 1),
        ("cluster_size", lambda s: s.cluster_size, 2),
        ("icc", lambda s: s.icc, 3),
        ("r2_within", lambda s: s.r2_within, 4),
        ("r2_between", lambda s: s.r2_between, 5),
    ]
    out: list[list[str]] = []

    def averaged(group: Sequence[CellMetrics]) -> dict[tuple[str, str, str], float]:
        sums: dict[tuple[str, str, str], list[float]] = {}
        for cell in group:
            for row in cell.rows:
                if row.regime == "truth":
                    continue
                sums.setdefault((row.regime, row.parameter, row.metric), []).append(row.value)
        return {key: float(np.mean(vals)) for key, vals in sums.items()}

    for name, getter, col in factors:
        levels = sorted({getter(c.spec) for c in cells})
        if len(levels) < 2:
            continue
        for level in levels:
            group = [c for c in cells if getter(c.spec) == level]
            label = f"marginal_{name}_{_fmt(float(level))}"
            prefix = [label, "", "", "", "", ""]
            prefix[col] = _fmt(float(level)) if col > 2 else str(level)
            for (regime, parameter, metric), value in sorted(averaged(group).items()):
                out.append(prefix + [regime, parameter, metric, _fmt(value)])
    prefix = ["marginal_total", "", "", "", "", ""]
    for (regime, parameter, metric), value in sorted(averaged(cells).items()):
        out.append(prefix + [regime, parameter, metric, _fmt(value)])
    return out


def write_metrics_csv(
    path: str | Path,
    cells: Sequence[CellMetrics],
    include_marginals: bool = True,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for cell in cells:
            writer.writerows(metrics_rows(cell))
        if include_marginals and len(cells) > 1:
            writer.writerows(_marginal_rows(cells))


def write_replicates_csv(path: str | Path, records: Sequence[ReplicateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPLICATES_CSV_HEADER)
        for record in records:
            if record.result is None:
                writer.writerow(
                    [record.rep, record.regime, "", "", "", "", "", "", "", "false",
                     record.error or "failed"]
                )
                continue
            for row in record.result.to_csv_rows():
                writer.writerow([record.rep] + row + [""])
