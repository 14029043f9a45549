"""Command-line interface: ``dpdam {fit,select,predict,simulate,diagnose}``.

Exit codes: 0 on success, 1 for user errors (bad flags, malformed data,
non-convergence) and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__
from .basis import build_design, make_basis, rescale_to_unit
from .diagnostics import (
    boxplot_csv,
    influence_at,
    influence_sweep,
    residual_summary,
    summarize_standardized,
    to_json,
)
from .errors import NumericalError
from .modelfile import ModelFile, load as load_model
from .parallel import default_threads
from .penalty import PenaltySpec
from .selection import DEFAULT_NUS, HSCORE_FORMS, HSCORE_SCALES, IC_KINDS, SelectionGrid, fit_path, select_nu_multi
from .simulate import ESTIMATORS, ExperimentSettings, format_float, load_scenario, run_experiment, scenario_from_mapping
from .solver import FitConfig, fit_unpenalized, predict, with_scaler

log = logging.getLogger("dpdam")


class UserError(Exception):
    """Invalid input; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- data files


def read_csv(path, response: str | None = None):
    """``(X, y, covariate_names, response_name)`` from a header CSV.

    Without ``response`` every column is a covariate and ``y`` is None.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise UserError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise UserError(f"{path}: duplicate column names")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise UserError(f"{path}: no data rows")
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise UserError(f"{path}: line {i} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan"):
                raise UserError(f"{path}: missing value in column {header[j]!r} on line {i}")
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise UserError(f"{path}: non-numeric value {cell!r} in column {header[j]!r} on line {i}") from None
    if not np.all(np.isfinite(data)):
        raise UserError(f"{path}: non-finite values")
    if response is None:
        return data, None, header, None
    if response not in header:
        raise UserError(f"{path}: response column {response!r} not found")
    k = header.index(response)
    names = [h for j, h in enumerate(header) if j != k]
    if not names:
        raise UserError(f"{path}: no covariate columns")
    return np.delete(data, k, axis=1), data[:, k], names, response


def write_csv(path, header, rows) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()


def write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _prepare(args):
    X_raw, y, names, response = read_csv(args.data, args.response)
    try:
        X, scaler = rescale_to_unit(X_raw)
    except ValueError as exc:
        raise UserError(f"{args.data}: {exc}") from None
    basis = make_basis(args.num_knots, args.basis_order)
    n, k = X.shape[0], X.shape[1] * basis.m
    if n < k / 2:
        raise UserError(f"{args.data}: {n} rows is too few for {X.shape[1]} covariates x {basis.m} basis functions")
    if n < k:
        log.warning("only %d rows for %d spline coefficients; the unpenalized fit is not identified", n, k)
    try:
        design = build_design(X, basis)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    return design, y, names, response, scaler


def _config(args) -> FitConfig:
    return FitConfig(max_outer_iters=args.max_iter, seed=getattr(args, "seed", 0) or 0)


def _parse_floats(text: str, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UserError(f"{what} must be a comma-separated list of numbers") from None
    if not vals:
        raise UserError(f"{what} is empty")
    return vals


def _report_fit(fit, names) -> None:
    active = [names[j] for j in fit.active_set]
    print(f"objective {format_float(fit.objective)}")
    print(f"sigma2 {format_float(fit.sigma2)}")
    print(f"active {len(active)}: {' '.join(active) if active else '(intercept only)'}")
    if not fit.usable:
        print("warning: fit did not converge to a usable solution", file=sys.stderr)


def _finish_fit(args, fit, names, response, selection) -> int:
    mf = ModelFile(fit=fit, covariates=names, response=response, selection=selection)
    _report_fit(fit, names)
    if not fit.usable:
        if args.strict:
            print("error: fit not converged; model not written (--strict)", file=sys.stderr)
            return 1
        mf.save(args.out)
        print(f"error: fit not converged; flagged model written to {args.out}", file=sys.stderr)
        return 1
    mf.save(args.out)
    return 0


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    design, y, names, response, scaler = _prepare(args)
    config = _config(args)
    if args.lam < 0:
        raise UserError("--lambda must be >= 0")
    if args.lam == 0.0:
        fit = fit_unpenalized(design, y, args.nu, config)
    else:
        penalty = PenaltySpec(args.penalty, args.lam, args.shape)
        fit = fit_path(design, y, args.nu, penalty, lambdas=[args.lam], config=config).fits[0]
    fit = with_scaler(fit, scaler)
    return _finish_fit(args, fit, names, response, {"mode": "fit"})


def _selection_summary(report) -> dict:
    fin = lambda x: float(x) if np.isfinite(x) else repr(float(x))
    return {
        "mode": "select",
        "ic": report.ic_kind,
        "hscore_form": report.hscore_form,
        "hscore_scale": report.hscore_scale,
        "chosen_nu": float(report.chosen_nu),
        "chosen_lambda": float(report.final_fit.lam),
        "nu_scores": {repr(float(k)): fin(v) for k, v in sorted(report.nu_scores.items())},
        "lambda_per_nu": {repr(float(k)): float(v) for k, v in sorted(report.chosen_lambda_per_nu.items())},
    }


def cmd_select(args) -> int:
    design, y, names, response, scaler = _prepare(args)
    nus = _parse_floats(args.nu_grid, "--nu-grid") if args.nu_grid else DEFAULT_NUS
    lambdas = _parse_floats(args.lambda_grid, "--lambda-grid") if args.lambda_grid else None
    try:
        grid = SelectionGrid(lambdas=lambdas, nus=nus, ic_kind=args.ic, n_lambda=args.lambda_grid_size)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    threads = args.threads if args.threads is not None else default_threads()
    report = select_nu_multi(
        design,
        y,
        (args.ic,),
        penalty_kind=args.penalty,
        grid=grid,
        config=_config(args),
        hscore_form=args.hscore_form,
        shape=args.shape,
        threads=threads,
        hscore_scale=args.hscore_scale,
    )[args.ic]
    chosen = (report.chosen_nu, report.final_fit.lam)
    rows = []
    for c in report.cells:
        rows.append(
            [
                format_float(c.nu),
                format_float(c.lam),
                c.df,
                format_float(c.sigma2),
                format_float(c.ic),
                format_float(c.hscore),
                ";".join(names[j] for j in c.active_set),
                int(c.converged),
                int(c.degenerate),
                int((c.nu, c.lam) == chosen),
            ]
        )
    if args.report:
        header = ["nu", "lambda", "df", "sigma2", "ic", "hscore", "active", "converged", "degenerate", "chosen"]
        write_csv(args.report, header, rows)
    print(f"chosen nu {format_float(report.chosen_nu)} lambda {format_float(report.final_fit.lam)}")
    fit = with_scaler(report.final_fit, scaler)
    return _finish_fit(args, fit, names, response, _selection_summary(report))


def _load_model(path) -> ModelFile:
    try:
        return load_model(path)
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UserError(f"{path}: {exc}") from None


def _covariates_for(mf: ModelFile, path):
    X_all, _, header, _ = read_csv(path, None)
    missing = [c for c in mf.covariates if c not in header]
    if missing:
        raise UserError(f"{path}: missing covariate column(s) {', '.join(missing)}")
    idx = [header.index(c) for c in mf.covariates]
    y = X_all[:, header.index(mf.response)] if mf.response in header else None
    return X_all[:, idx], y


def cmd_predict(args) -> int:
    mf = _load_model(args.model)
    X, _ = _covariates_for(mf, args.data)
    yhat, comps, n_clamped = predict(mf.fit, X, return_clamped=True)
    header = ["yhat"]
    cols = [yhat]
    if args.components:
        header += [f"g_{c}" for c in mf.covariates]
        cols += list(comps.T)
    rows = [[format_float(v) for v in row] for row in zip(*cols)]
    write_csv(args.out, header, rows)
    if n_clamped:
        print(f"warnings: {n_clamped} covariate value(s) outside the training range were clamped", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario) if args.scenario else scenario_from_mapping({})
        inline = {
            k: v
            for k, v in {
                "n": args.n,
                "p": args.p,
                "error_kind": args.error,
                "sigma": args.sigma,
                "contam_frac": args.contam_frac,
                "contam_shift": args.contam_shift,
                "n_replicates": args.replicates,
                "seed": args.seed,
                "trim_fraction": args.omega,
                "n_test": args.n_test,
                "name": args.name,
            }.items()
            if v is not None
        }
        scenario = scenario_from_mapping(inline, scenario)
        estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
        settings = ExperimentSettings(
            nus=_parse_floats(args.nu_grid, "--nu-grid") if args.nu_grid else DEFAULT_NUS,
            n_lambda=args.lambda_grid_size,
            hscore_form=args.hscore_form,
            hscore_scale=args.hscore_scale,
        )
        threads = args.threads if args.threads is not None else default_threads()
        report = run_experiment(scenario, estimators, settings, threads=threads)
    except (ValueError, OSError) as exc:
        raise UserError(str(exc)) from None
    write_text(args.out, report.to_csv())
    if args.out not in (None, "-"):
        sys.stdout.write(report.to_table())
    return 0


def cmd_diagnose(args) -> int:
    mf = _load_model(args.model)
    fit = mf.fit
    X_raw, y = _covariates_for(mf, args.data)
    if y is None:
        raise UserError(f"{args.data}: response column {mf.response!r} not found")
    X = X_raw if fit.scaler is None else fit.scaler.transform(X_raw, clamp=True)[0]
    design = build_design(X, fit.basis, fit.column_means)
    summary = residual_summary(fit, design, y)
    out = {"residuals": summary.to_dict(), "influence_kind": "empirical"}
    if args.x0 is not None or args.y0 is not None or args.sweep:
        x0 = np.array(_parse_floats(args.x0, "--x0")) if args.x0 is not None else X_raw[0]
        if x0.size != len(mf.covariates):
            raise UserError(f"--x0 needs {len(mf.covariates)} values")
        if args.sweep:
            out["sweep"] = influence_sweep(fit, design, y, x0).to_dict()
        if args.y0 is not None or not args.sweep:
            y0 = args.y0 if args.y0 is not None else float(predict(fit, x0[None, :])[0][0])
            out["influence"] = influence_at(fit, design, y, x0, y0).to_dict()
    write_text(args.out, to_json(out) + "\n")
    if args.boxplot:
        _, comps = predict(fit, X_raw)
        boxes = {"standardized_residual": summary}
        for j in fit.active_set:
            boxes[f"g_{mf.covariates[j]}"] = summarize_standardized(comps[:, j])
        write_text(args.boxplot, boxplot_csv(boxes))
    return 0


# ---------------------------------------------------------------- parser


def _add_model_flags(p, require_lambda: bool) -> None:
    p.add_argument("--data", required=True, help="training CSV with a header row")
    p.add_argument("--response", required=True, help="name of the response column")
    p.add_argument("--out", required=True, help="path of the JSON model file to write")
    p.add_argument("--penalty", default="scad", choices=["scad", "mcp", "glasso"])
    p.add_argument("--shape", type=float, default=None, help="SCAD/MCP concavity parameter a")
    p.add_argument("--basis-order", type=int, default=4, help="spline order (4 = cubic)")
    p.add_argument("--num-knots", type=int, default=2, help="number of interior knots")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--strict", action="store_true", help="do not write a model that failed to converge")
    if require_lambda:
        p.add_argument("--nu", type=float, required=True)
        p.add_argument("--lambda", dest="lam", type=float, required=True)


def _add_selection_flags(p) -> None:
    p.add_argument("--nu-grid", default=None, help="comma-separated nu values")
    p.add_argument("--lambda-grid-size", type=int, default=30)
    p.add_argument("--hscore-form", default="definition", choices=HSCORE_FORMS)
    p.add_argument("--hscore-scale", default="reference", choices=HSCORE_SCALES)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: DPDAM_THREADS or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpdam", description="Robust sparse additive models by density power divergence.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit at a fixed (nu, lambda)")
    _add_model_flags(p, require_lambda=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="select lambda by an information criterion and nu by the H-score")
    _add_model_flags(p, require_lambda=False)
    _add_selection_flags(p)
    p.add_argument("--ic", default="ebic", choices=IC_KINDS)
    p.add_argument("--lambda-grid", default=None, help="explicit comma-separated lambda values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="CSV path for the full (nu, lambda) grid report")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="predict from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--components", action="store_true", help="also write the fitted component curves")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run a replicated simulation experiment")
    p.add_argument("--scenario", default=None, help="INI file with a [scenario] section")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--error", default=None, choices=["gaussian", "contaminated", "cauchy", "chisq1"])
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--contam-frac", type=float, default=None)
    p.add_argument("--contam-shift", type=float, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--omega", type=float, default=None, help="trim fraction for the trimmed MPE")
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--name", default=None)
    p.add_argument("--estimators", default="dpd-bic,ls,oracle", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    p.add_argument("--out", default="-", help="CSV path (default stdout)")
    _add_selection_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="residual summary and empirical influence function")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--x0", default=None, help="comma-separated covariate row for the contamination point")
    p.add_argument("--y0", type=float, default=None)
    p.add_argument("--sweep", action="store_true", help="sweep y0 over fitted +- 10^k sigma_hat")
    p.add_argument("--out", default="-", help="JSON path (default stdout)")
    p.add_argument("--boxplot", default=None, help="CSV path for box-plot statistics")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        cond = getattr(exc, "condition", None)
        extra = f" (condition number {cond:.3e})" if cond is not None else ""
        print(f"numerical failure: {exc}{extra}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
