"""Command-line surface: prior derivation, model fitting, simulation, reports.

Exit codes: 0 on success (warnings allowed), 2 on usage or validation
problems, 3 on numeric estimation failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .distributions import InverseGammaPrior, quantile
from .estimators import (
    EstimationError,
    FitResult,
    INTERCEPT_VARIANCE,
    McmcSettings,
    PriorConfig,
    RESIDUAL_VARIANCE,
    RESULT_CSV_HEADER,
    VariancePrior,
    gibbs_fit,
    ml_fit,
)
from .harness import (
    DEFAULT_SEED,
    REGIMES,
    StudyPlan,
    TwoStageRule,
    _strength_shapes,
    run_grid,
    sensitivity_sweep,
    sensitivity_to_csv,
    two_stage_cell,
    write_metrics_csv,
    write_replicates_csv,
)
from .model import ModelFormula, generate, read_dataset_csv, solve_condition
from .priors import (
    PRIOR_DIALECTS,
    derive_ig_from_sd,
    emit_prior_syntax,
    mode_matched_ig,
)
from .report import write_report

__all__ = ["main"]


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _csv_names(text: str) -> list[str]:
    return [part for part in (piece.strip() for piece in text.split(",")) if part]


def _anchor_pair(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"anchors are written name=value, got {text!r}")
    try:
        return name, float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"anchor value in {text!r} is not numeric") from exc


# ---------------------------------------------------------------------------
# prior


def _ig_payload(prior: InverseGammaPrior) -> dict:
    return {
        "shape": prior.shape,
        "scale": prior.scale,
        "mode": prior.mode,
        "mean": prior.mean,
    }


def _prior_payload(args: argparse.Namespace) -> dict:
    routes = [
        args.sd is not None or args.df is not None,
        args.mode is not None or args.shape is not None,
        args.scale_from is not None or args.ratio is not None,
    ]
    if sum(routes) != 1:
        raise ValueError(
            "choose exactly one construction: --sd with --df, --mode with --shape, "
            "or --scale-from with --ratio"
        )
    if args.sd is not None or args.df is not None:
        if args.sd is None or args.df is None:
            raise ValueError("--sd and --df must be given together")
        trace = derive_ig_from_sd(args.sd, args.df)
        return {"kind": "sd_derivation", "trace": trace.to_dict()}
    if args.mode is not None or args.shape is not None:
        if args.mode is None or args.shape is None:
            raise ValueError("--mode and --shape must be given together")
        prior = mode_matched_ig(args.mode, args.shape)
        return {
            "kind": "mode_strength",
            "inputs": {"mode": float(args.mode), "shape": float(args.shape)},
            "inverse_gamma": _ig_payload(prior),
        }
    if args.scale_from is None or args.ratio is None:
        raise ValueError("--scale-from and --ratio must be given together")
    if not 0.0 < args.ratio <= 1.0:
        raise ValueError(f"--ratio must lie in (0, 1], got {args.ratio}")
    full_prior, mode = _load_prior_file(args.scale_from)
    sub_shape = full_prior.shape * args.ratio
    prior = mode_matched_ig(mode, sub_shape)
    return {
        "kind": "subsample_scaling",
        "inputs": {"mode": mode, "full_shape": full_prior.shape, "ratio": float(args.ratio)},
        "inverse_gamma": _ig_payload(prior),
    }


def _load_prior_file(path: str | Path) -> tuple[InverseGammaPrior, float]:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    try:
        if data.get("kind") == "sd_derivation":
            ig = data["trace"]["inverse_gamma"]
            mode = float(data["trace"]["inputs"]["target_mode"])
        else:
            ig = data["inverse_gamma"]
            inputs = data.get("inputs", {})
            mode = float(inputs.get("mode", ig["scale"] / (ig["shape"] + 1.0)))
        return InverseGammaPrior(float(ig["shape"]), float(ig["scale"])), mode
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a prior file written by the prior command") from exc


def _prior_summary(payload: dict, name: str) -> str:
    ig = payload["trace"]["inverse_gamma"] if payload["kind"] == "sd_derivation" else payload["inverse_gamma"]
    prior = InverseGammaPrior(float(ig["shape"]), float(ig["scale"]))
    mean = "undefined (shape <= 1)" if prior.mean is None else repr(prior.mean)
    variance = "undefined (shape <= 2)" if prior.variance is None else repr(prior.variance)
    lo, hi = quantile(prior, 0.05), quantile(prior, 0.95)
    lines = [
        f"prior name: {name}",
        f"construction: {payload['kind']}",
        f"inverse gamma shape: {prior.shape!r}",
        f"inverse gamma scale: {prior.scale!r}",
        f"mode: {prior.mode!r}",
        f"mean: {mean}",
        f"variance: {variance}",
        f"90% interval: [{lo!r}, {hi!r}]",
    ]
    for dialect in PRIOR_DIALECTS:
        lines.append(f"syntax ({dialect}): {emit_prior_syntax(prior, name, dialect)}")
    return "\n".join(lines) + "\n"


def cmd_prior(args: argparse.Namespace) -> int:
    payload = _prior_payload(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prior.json").write_text(json.dumps(payload, indent=2) + "\n")
    (out / "prior_summary.txt").write_text(_prior_summary(payload, args.name))
    print(f"wrote {out / 'prior.json'} and {out / 'prior_summary.txt'}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _regime_config_from_files(
    regime: str,
    columns: tuple[str, ...],
    anchors: dict[str, float],
    l1_prior: InverseGammaPrior | None,
    l2_prior: InverseGammaPrior | None,
) -> PriorConfig:
    anchored = regime.startswith("anchored_coef")
    if regime in ("flat", "anchored_coef"):
        l1_var, l2_var = VariancePrior.improper_flat(), VariancePrior.improper_flat()
    elif regime.endswith("weak_var"):
        l1_var, l2_var = VariancePrior.weak(), VariancePrior.weak()
    else:
        if l1_prior is None or l2_prior is None:
            raise ValueError(
                f"regime {regime!r} needs --prior-l1 and --prior-l2 files "
                "(build them with the prior command)"
            )
        l1_var = VariancePrior.mode_matched(l1_prior)
        l2_var = VariancePrior.mode_matched(l2_prior)
    if not anchored:
        return PriorConfig(coef_prior="flat_default", l1_variance=l1_var, l2_variance=l2_var)
    missing = [c for c in columns if c not in anchors]
    if missing:
        _warn(
            "no anchor given for "
            + ", ".join(missing)
            + "; defaulting those coefficient prior centers to 0"
        )
    anchor = tuple(anchors.get(c, 0.0) for c in columns)
    return PriorConfig(
        coef_prior="centered_weak", anchor=anchor, l1_variance=l1_var, l2_variance=l2_var
    )


def cmd_fit(args: argparse.Namespace) -> int:
    regimes = _csv_names(args.regimes)
    unknown = [r for r in regimes if r not in REGIMES]
    if unknown:
        raise ValueError(f"unknown regimes {unknown}; valid regimes are {list(REGIMES)}")
    if not regimes:
        raise ValueError("no regimes requested")
    l1 = _csv_names(args.l1) if args.l1 else []
    l2 = _csv_names(args.l2) if args.l2 else []
    interactions = _csv_names(args.interactions) if args.interactions else []
    data = read_dataset_csv(args.data, l1, l2, center_l1=args.center_l1)
    formula = ModelFormula(l1=tuple(l1), l2=tuple(l2), interactions=tuple(interactions))
    anchors = dict(args.anchor or [])
    l1_prior = _load_prior_file(args.prior_l1)[0] if args.prior_l1 else None
    l2_prior = _load_prior_file(args.prior_l2)[0] if args.prior_l2 else None
    settings = McmcSettings(
        chains=args.chains,
        iterations=args.iterations,
        burnin=args.burnin,
        thin=args.thin,
    )
    columns = formula.fixed_names
    results: list[FitResult] = []
    failures: list[str] = []
    for regime in regimes:
        try:
            if regime == "ml":
                result = ml_fit(data, formula)
            else:
                config = _regime_config_from_files(regime, columns, anchors, l1_prior, l2_prior)
                rng = np.random.default_rng(
                    np.random.SeedSequence(args.seed, spawn_key=(1 + REGIMES.index(regime),))
                )
                result = gibbs_fit(data, formula, config, settings, rng)
            result = replace(result, method=regime)
            results.append(result)
            if not result.converged:
                _warn(f"regime {regime}: not converged (scale reduction above threshold)")
        except EstimationError as exc:
            failures.append(f"{regime}: {exc}")
            _fail(f"regime {regime} failed: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = [",".join(RESULT_CSV_HEADER)]
    for result in results:
        csv_lines.extend(",".join(row) for row in result.to_csv_rows())
    (out / "fit_results.csv").write_text("\n".join(csv_lines) + "\n")
    payload = {"fits": [r.to_dict() for r in results], "failures": failures}
    (out / "fit_results.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {out / 'fit_results.csv'} and {out / 'fit_results.json'}")
    return 3 if failures else 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    plan = StudyPlan.from_json(Path(args.plan).read_text())
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(message: str) -> None:
        print(message, file=sys.stderr)

    if args.mode == "grid":
        run_grid(plan, out_dir=out, workers=args.workers, progress=progress)
    elif args.mode == "two-stage":
        rule = TwoStageRule(
            a_tau=None if plan.l2_strength_df is None else plan.l2_strength_df / 2.0,
            a_sigma=None if plan.l1_strength_df is None else plan.l1_strength_df / 2.0,
        )
        cell_specs = plan.cells()
        cells = []
        for index, spec in cell_specs:
            records: list = []
            metrics = two_stage_cell(spec, rule, plan, index, records_out=records)
            cell_dir = out / "cells" / metrics.cell_id
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_replicates_csv(cell_dir / "replicates.csv", records)
            cells.append(metrics)
            progress(f"cell {metrics.cell_id} done ({len(cells)}/{len(cell_specs)})")
            write_metrics_csv(
                out / "metrics.csv",
                cells,
                include_marginals=len(cells) == len(cell_specs) and len(cells) > 1,
            )
    else:
        index, spec = plan.cells()[0]
        params = solve_condition(spec)
        if params.tau2 <= 0.0:
            raise ValueError("sensitivity mode needs a cell with positive intercept variance")
        rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(index, 0, 0)))
        data = generate(spec, params, rng)
        a_tau, a_sigma = _strength_shapes(spec, plan.l2_strength_df, plan.l1_strength_df)
        rows = sensitivity_sweep(
            data,
            ModelFormula.simulation_default(),
            mode_matched_ig(params.tau2, a_tau),
            mode_matched_ig(params.sigma2, a_sigma),
            params.tau2,
            params.sigma2,
            plan.mcmc,
            seed=plan.seed,
        )
        (out / "sensitivity.csv").write_text(sensitivity_to_csv(rows))
    print(f"results written under {out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    written = write_report(args.metrics, args.out)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modematch",
        description=(
            "Mode-matched inverse-gamma priors and two-level random-intercept "
            "model estimation"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prior = sub.add_parser("prior", help="construct a variance prior and emit reports")
    p_prior.add_argument("--sd", type=float, help="sample standard deviation input")
    p_prior.add_argument("--df", type=float, help="degrees of freedom for --sd")
    p_prior.add_argument("--mode", type=float, help="target mode (variance units)")
    p_prior.add_argument("--shape", type=float, help="prior shape for --mode")
    p_prior.add_argument("--scale-from", help="prior.json to rescale for a subsample")
    p_prior.add_argument("--ratio", type=float, help="subsample df ratio for --scale-from")
    p_prior.add_argument("--name", default="variance", help="parameter name in syntax output")
    p_prior.add_argument("--out", default=".", help="output directory")
    p_prior.add_argument("--seed", type=int, default=DEFAULT_SEED, help="unused; accepted for uniformity")
    p_prior.set_defaults(func=cmd_prior)

    p_fit = sub.add_parser("fit", help="fit the model to a clustered CSV dataset")
    p_fit.add_argument("data", help="CSV with cluster,y and predictor columns")
    p_fit.add_argument("--l1", default="", help="comma-separated within-cluster columns")
    p_fit.add_argument("--l2", default="", help="comma-separated cluster-level columns")
    p_fit.add_argument("--interactions", default="", help="comma-separated a:b terms")
    p_fit.add_argument(
        "--center-l1", action="store_true", help="center L1 columns at ingestion"
    )
    p_fit.add_argument(
        "--regimes", default=",".join(REGIMES), help="comma-separated regimes to run"
    )
    p_fit.add_argument(
        "--anchor",
        type=_anchor_pair,
        action="append",
        help="name=value coefficient prior center (repeatable)",
    )
    p_fit.add_argument("--prior-l1", help="prior.json for the residual variance")
    p_fit.add_argument("--prior-l2", help="prior.json for the intercept variance")
    p_fit.add_argument("--chains", type=int, default=2)
    p_fit.add_argument("--iterations", type=int, default=10000)
    p_fit.add_argument("--burnin", type=int, default=None)
    p_fit.add_argument("--thin", type=int, default=1)
    p_fit.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_fit.add_argument("--out", default=".", help="output directory")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a simulation study plan")
    p_sim.add_argument("--plan", required=True, help="JSON study plan")
    p_sim.add_argument("--out", default="study_out", help="output directory")
    p_sim.add_argument(
        "--mode", choices=("grid", "two-stage", "sensitivity"), default="grid"
    )
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None, help="override the plan seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("report", help="render SVG figures from metrics.csv")
    p_rep.add_argument("--metrics", required=True, help="metrics.csv from simulate")
    p_rep.add_argument("--out", default=".", help="output directory")
    p_rep.add_argument("--seed", type=int, default=DEFAULT_SEED, help="unused; accepted for uniformity")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
        return 2
    except EstimationError as exc:
        _fail(f"estimation failed: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
