"""Command line interface.

Subcommands: ``ingest``, ``fit``, ``placebo``, ``conformal``, ``compare``,
``simulate``. Every subcommand resolves its options from built-in defaults,
an optional JSON config file (``--config``), and explicit flags (highest
precedence), writes the resolved options to ``config_echo.json`` in the
output directory, and can be rerun bit-identically from that echo. All
randomness flows from the single ``--seed`` option. Report paths write
delimited/JSON artifacts and, unless ``--no-figures`` is given, PNG
figures alongside them.

Exit codes: 0 success, 1 analysis error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .effects import counterfactual, effect_report, fit_metrics, rmspe, mae
from .errors import ConfigError, DataError, SchemaError, TreeSynthError
from .estimators import EstimatorSpec, fit_estimator
from .forest import ForestConfig
from .inference import (
    SCHEMES,
    conformal_test,
    placebo_rank_report,
    placebo_specification_test,
    run_placebos,
)
from .panel import (
    SplitSpec,
    aggregate_weekly,
    build_panel,
    ingest_csv,
    onset_index,
    read_weekly_csv,
    summary_stats_frame,
    temporal_split,
    write_weekly_csv,
)
from .simulate import panel_to_frame, simulate_panel

THREADS_ENV = "TREESYNTH_THREADS"


# ----------------------------------------------------------------------
# option plumbing


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_config(path, command: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if isinstance(payload, dict) and "options" in payload:
        declared = payload.get("command")
        if declared is not None and declared != command:
            raise ConfigError(f"config file is for command {declared!r}, not {command!r}")
        payload = payload["options"]
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object of options")
    return payload


def _resolve(args, command: str, defaults: dict) -> dict:
    options = dict(defaults)
    if getattr(args, "config", None):
        file_opts = _load_config(args.config, command)
        unknown = sorted(set(file_opts) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown option(s) in config file: {', '.join(unknown)}")
        options.update(file_opts)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    return options


def _require(options: dict, *keys: str) -> None:
    missing = [k for k in keys if options.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


def _out_dir(options: dict) -> Path:
    out = Path(options["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_echo(out: Path, command: str, options: dict) -> None:
    echo = {"command": command, "version": __version__, "options": options}
    _write_json(out / "config_echo.json", echo)


def _safe_name(unit: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", unit)


def _load_panel(options: dict):
    frame = read_weekly_csv(options["panel"])
    t0 = _parse_t0(frame.index, options["t0"])
    return build_panel(frame, options["treated"], t0)


def _parse_t0(index, value) -> int:
    text = str(value)
    if re.fullmatch(r"\d+", text):
        return int(text)
    return onset_index(index, text)


def _estimator_spec(options: dict) -> EstimatorSpec:
    forest = ForestConfig(
        alpha=options["alpha"],
        k=options["k"],
        m_leaf=options["m_leaf"],
        mtry=options["mtry"],
        n_trees=options["trees"],
        seed=options["seed"],
        bagging=options["bagging"],
        block_length=options["bagging_block_length"],
    )
    return EstimatorSpec(
        kind=options["estimator"],
        forest=forest,
        enet_lambda=options["lam"],
        enet_alpha_mix=options["alpha_mix"],
        enet_standardize=options["standardize"],
        tune=options["tune"],
        split=SplitSpec(options["split_fraction"]),
    )


_ESTIMATOR_DEFAULTS = {
    "estimator": "forest",
    "trees": 500,
    "mtry": None,
    "k": 5,
    "alpha": 0.05,
    "m_leaf": None,
    "bagging": "none",
    "bagging_block_length": 3,
    "lam": 1.0,
    "alpha_mix": 0.5,
    "standardize": False,
    "tune": False,
    "split_fraction": 0.8,
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--output-dir", dest="output_dir", help="directory for all artifacts")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--threads", type=int,
                        help=f"worker cap (informational; default ${THREADS_ENV} or 1)")


def _add_panel_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--panel", help="panel CSV (week_start plus one column per unit)")
    parser.add_argument("--treated", help="name of the treated unit column")
    parser.add_argument("--t0", help="onset: ISO date of the first post week, or pre-period count")


def _add_estimator_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--estimator", choices=("forest", "scm", "enet"))
    parser.add_argument("--trees", type=int, help="forest: ensemble size")
    parser.add_argument("--mtry", type=int, help="forest: candidate directions per split")
    parser.add_argument("--k", type=int, help="forest: minimum leaf size")
    parser.add_argument("--alpha", type=float, help="forest: minimum child share of parent")
    parser.add_argument("--m-leaf", dest="m_leaf", type=int, help="forest: strict max leaf size")
    parser.add_argument("--bagging", choices=("none", "block"))
    parser.add_argument("--bagging-block-length", dest="bagging_block_length", type=int)
    parser.add_argument("--lambda", dest="lam", type=float, help="elastic net: penalty weight")
    parser.add_argument("--alpha-mix", dest="alpha_mix", type=float, help="elastic net: l1 share")
    parser.add_argument("--standardize", action="store_true", default=None,
                        help="elastic net: standardize predictors internally")
    parser.add_argument("--tune", action="store_true", default=None,
                        help="tune hyperparameters on a temporal split before the final fit")
    parser.add_argument("--split-fraction", dest="split_fraction", type=float,
                        help="estimation share of the tuning split")


def _add_figures_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--figures", action=argparse.BooleanOptionalAction, default=None,
                        help="render PNG figures next to the delimited output")


# ----------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    defaults = {
        "input": None,
        "date_col": "date",
        "unit_col": "unit",
        "count_col": "count",
        "start": None,
        "end": None,
        "merge": [],
        "summary": False,
        "output_dir": ".",
        "seed": 0,
        "threads": _default_threads(),
    }
    options = _resolve(args, "ingest", defaults)
    _require(options, "input")
    out = _out_dir(options)

    try:
        raw = ingest_csv(options["input"], schema={
            "date": options["date_col"],
            "unit": options["unit_col"],
            "count": options["count_col"],
        })
        merge_map = _parse_merges(options["merge"])
        weekly = aggregate_weekly(raw, start_date=options["start"], merge=merge_map,
                                  end_date=options["end"])
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    write_weekly_csv(weekly, out / "panel.csv")
    print(f"ingested {raw.source_rows} rows -> {weekly.shape[0]} weeks x {weekly.shape[1]} units")
    print(f"panel written to {out / 'panel.csv'}")
    stats = summary_stats_frame(weekly).round(1)
    print(stats.to_string())
    if options["summary"]:
        stats.to_csv(out / "summary_stats.csv")
    _write_echo(out, "ingest", options)
    return 0


def _parse_merges(merge_flags) -> dict:
    mapping = {}
    for item in merge_flags or []:
        if "=" not in item:
            raise ConfigError(f"--merge expects SRC[+SRC...]=TARGET; got {item!r}")
        sources, target = item.split("=", 1)
        for src in sources.split("+"):
            if not src or not target:
                raise ConfigError(f"--merge expects SRC[+SRC...]=TARGET; got {item!r}")
            mapping[src] = target
    return mapping


def cmd_fit(args) -> int:
    defaults = {
        "panel": None,
        "treated": None,
        "t0": None,
        "seed": 0,
        "n_boot": 10000,
        "boot_block_length": 3,
        "level": 0.95,
        "figures": True,
        "output_dir": ".",
        "threads": _default_threads(),
        **_ESTIMATOR_DEFAULTS,
    }
    options = _resolve(args, "fit", defaults)
    _require(options, "panel", "treated", "t0")
    out = _out_dir(options)

    panel = _load_panel(options)
    spec = _estimator_spec(options)
    model = fit_estimator(panel, panel.pre_rows, spec)
    fit = counterfactual(panel, model)
    report = effect_report(panel, fit, n_boot=options["n_boot"],
                           block_length=options["boot_block_length"],
                           level=options["level"], seed=options["seed"])
    metrics = fit_metrics(fit)

    model.save(out / "model.json")
    fit.save_csv(out / "gaps.csv")
    _write_json(out / "effect_report.json", report.to_dict())
    _write_json(out / "fit_metrics.json", metrics.to_dict())
    if options["figures"]:
        from . import plots

        plots.plot_counterfactual(fit.times, fit.observed, fit.predictions, fit.t0,
                                  out / "counterfactual.png")
        plots.plot_gaps(fit.times, fit.gaps, fit.t0, out / "gaps.png")
    _write_echo(out, "fit", options)

    print(f"estimator: {model.tag}")
    if model.tag == "scm":
        weights = ", ".join(f"{n}={w:.4f}" for n, w in zip(panel.control_names, model.omega))
        print(f"weights: {weights} (sum={model.omega.sum():.10f})")
    elif model.tag == "enet":
        hyper = model.to_dict()["hyperparameters"]
        print(f"intercept: {model.to_dict()['intercept']:.4f}  "
              f"lambda: {hyper['lambda']:.6g}  alpha_mix: {hyper['alpha_mix']:.3g}"
              + ("  (tuned)" if options["tune"] else ""))
    print(f"avg effect (model): {report.ate_hat:.4f}  naive diff-in-means: {report.ate_naive:.4f}")
    print(f"bootstrap se: {report.boot_se:.4f}  "
          f"{int(options['level'] * 100)}% percentile CI: [{report.ci_low:.4f}, {report.ci_high:.4f}]  "
          f"normal CI: [{report.normal_ci_low:.4f}, {report.normal_ci_high:.4f}]")
    print(f"pre RMSPE: {metrics.pre_rmspe:.4f}  pre MAE: {metrics.pre_mae:.4f}")
    return 0


def cmd_placebo(args) -> int:
    defaults = {
        "panel": None,
        "treated": None,
        "t0": None,
        "seed": 0,
        "exclude_multiplier": 2.0,
        "figures": True,
        "output_dir": ".",
        "threads": _default_threads(),
        **_ESTIMATOR_DEFAULTS,
    }
    options = _resolve(args, "placebo", defaults)
    _require(options, "panel", "treated", "t0")
    out = _out_dir(options)

    panel = _load_panel(options)
    spec = _estimator_spec(options)
    main_model = fit_estimator(panel, panel.pre_rows, spec)
    main_fit = counterfactual(panel, main_model)
    main_metrics = fit_metrics(main_fit)

    study = run_placebos(panel, spec, exclusion_multiplier=options["exclude_multiplier"])
    report = placebo_rank_report(study, main_metrics, main_unit=panel.treated_name)

    report.table.to_csv(out / "placebo_summary.csv", index=False)
    main_fit.save_csv(out / f"gaps_{_safe_name(panel.treated_name)}.csv")
    for unit, fit in study.fits.items():
        fit.save_csv(out / f"gaps_{_safe_name(unit)}.csv")
    _write_json(out / "placebo_report.json", {**report.to_dict(), "errors": study.errors})
    if options["figures"]:
        from . import plots

        gaps_by_unit = {panel.treated_name: main_fit.gaps}
        gaps_by_unit.update({unit: fit.gaps for unit, fit in study.fits.items()})
        plots.plot_placebo_gaps(panel.times, gaps_by_unit, panel.treated_name, panel.t0,
                                out / "placebo_gaps.png", excluded=report.excluded)
    _write_echo(out, "placebo", options)

    print(report.table.to_string(index=False))
    print(f"main unit rank by RMSPE ratio: {report.main_rank_ratio_rmspe} "
          f"of {len(report.table)}")
    if report.excluded:
        print(f"excluded (pre RMSPE > {options['exclude_multiplier']}x main): "
              + ", ".join(report.excluded))
    for unit, msg in study.errors.items():
        print(f"placebo run failed for {unit}: {msg}", file=sys.stderr)
    return 0


def cmd_conformal(args) -> int:
    defaults = {
        "panel": None,
        "treated": None,
        "t0": None,
        "seed": 0,
        "scheme": "moving-block",
        "q": 1.0,
        "n_samples": 10000,
        "null": "zero",
        "spec_test": False,
        "kappa_max": 10,
        "figures": True,
        "output_dir": ".",
        "threads": _default_threads(),
        **_ESTIMATOR_DEFAULTS,
    }
    options = _resolve(args, "conformal", defaults)
    _require(options, "panel", "treated", "t0")
    out = _out_dir(options)

    panel = _load_panel(options)
    spec = _estimator_spec(options)
    scheme = options["scheme"].replace("-", "_")
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}; got {options['scheme']!r}")

    null_trajectory = _parse_null(options["null"], panel.n_periods - panel.t0)
    result = conformal_test(panel, spec, null_trajectory, scheme=scheme, q=options["q"],
                            n_samples=options["n_samples"], seed=options["seed"])
    _write_json(out / "conformal_result.json", result.to_dict())
    if options["figures"]:
        from . import plots

        plots.plot_permutation_hist(result.permutation_statistics, result.statistic,
                                    out / "permutation_hist.png")
    print(f"statistic: {result.statistic:.6f}  p-value ({scheme}): {result.p_value:.4f}  "
          f"permutations: {result.n_permutations}")

    if options["spec_test"]:
        pvalues = placebo_specification_test(panel, spec, options["kappa_max"],
                                             schemes=SCHEMES, q=options["q"],
                                             n_samples=options["n_samples"], seed=options["seed"])
        table = pd.DataFrame(
            {f"kappa_{k}": {s: pvalues[k][s] for s in SCHEMES} for k in sorted(pvalues)}
        )
        table.index.name = "scheme"
        table.to_csv(out / "spec_test.csv")
        print(table.to_string())
    _write_echo(out, "conformal", options)
    return 0


def _parse_null(value, n_post: int):
    if value == "zero":
        return np.zeros(n_post)
    series = pd.read_csv(value).iloc[:, -1].to_numpy(dtype=float)
    if series.size != n_post:
        raise ConfigError(f"null trajectory file holds {series.size} values; need {n_post}")
    return series


def cmd_compare(args) -> int:
    defaults = {
        "panel": None,
        "treated": None,
        "t0": None,
        "seed": 0,
        "holdout": 0.1,
        "trees": 500,
        "k": 5,
        "alpha": 0.05,
        "split_fraction": 0.8,
        "figures": True,
        "output_dir": ".",
        "threads": _default_threads(),
    }
    options = _resolve(args, "compare", defaults)
    _require(options, "panel", "treated", "t0")
    out = _out_dir(options)

    panel = _load_panel(options)
    split = SplitSpec(options["split_fraction"])
    specs = {
        "forest": EstimatorSpec(
            kind="forest",
            forest=ForestConfig(alpha=options["alpha"], k=options["k"],
                                n_trees=options["trees"], seed=options["seed"]),
            tune=True,
            split=split,
        ),
        "scm": EstimatorSpec(kind="scm"),
        "enet": EstimatorSpec(kind="enet", tune=True, split=split),
    }

    rows = []
    predictions = {}
    for tag, spec in specs.items():
        model = fit_estimator(panel, panel.pre_rows, spec)
        fit = counterfactual(panel, model)
        metrics = fit_metrics(fit)
        predictions[tag] = fit.predictions
        rows.append({
            "estimator": tag,
            "pre_mae": metrics.pre_mae,
            "pre_rmspe": metrics.pre_rmspe,
            "post_std": metrics.post_std,
            "avg_gap_post": metrics.avg_gap_post,
        })
    rows.append({
        "estimator": "matrix completion",
        "pre_mae": None, "pre_rmspe": None, "post_std": None, "avg_gap_post": None,
        "note": "not implemented; see Athey et al. on matrix completion",
    })
    main_table = pd.DataFrame(rows)
    main_table.to_csv(out / "comparison.csv", index=False)
    print(main_table.to_string(index=False))

    if options["holdout"]:
        val_rows = _holdout_table(panel, specs, options["holdout"])
        val_table = pd.DataFrame(val_rows)
        val_table.to_csv(out / "validation.csv", index=False)
        print(val_table.to_string(index=False))

    if options["figures"]:
        from . import plots

        plots.plot_estimator_comparison(panel.times, panel.treated, predictions, panel.t0,
                                        out / "comparison.png")
    _write_echo(out, "compare", options)
    return 0


def _holdout_table(panel, specs, holdout: float) -> list:
    if not (0.0 < holdout < 1.0):
        raise ConfigError(f"holdout fraction must lie in (0, 1); got {holdout}")
    est, val = temporal_split(panel, SplitSpec(1.0 - holdout))
    rows = []
    for tag, spec in specs.items():
        model = fit_estimator(panel, est, spec)
        fit = counterfactual(panel, model)
        gaps = fit.gaps[val]
        rows.append({"estimator": tag, "rmspe": rmspe(gaps), "mae": mae(gaps)})
    rows.append({"estimator": "matrix completion", "rmspe": None, "mae": None,
                 "note": "not implemented; see Athey et al. on matrix completion"})
    return rows


def cmd_simulate(args) -> int:
    defaults = {
        "dgp": "interaction",
        "n_controls": 2,
        "t0": 101,
        "t_post": 48,
        "beta": "1,1,0.5",
        "tau": 10.0,
        "noise": 1.0,
        "ar_coef": 0.5,
        "seed": 0,
        "output_dir": ".",
        "threads": _default_threads(),
    }
    options = _resolve(args, "simulate", defaults)
    out = _out_dir(options)

    beta = tuple(float(b) for b in str(options["beta"]).split(","))
    sim = simulate_panel(
        dgp=options["dgp"],
        n_controls=int(options["n_controls"]),
        t0=int(options["t0"]),
        t_post=int(options["t_post"]),
        beta=beta,
        tau=options["tau"],
        noise=options["noise"],
        ar_coef=options["ar_coef"],
        seed=options["seed"],
    )
    write_weekly_csv(panel_to_frame(sim.panel), out / "panel.csv")
    _write_json(out / "truth.json", sim.truth_dict())
    _write_echo(out, "simulate", options)
    print(f"simulated panel: {sim.panel.n_periods} weeks x "
          f"{sim.panel.n_controls} controls, onset at {sim.panel.t0}, effect {sim.tau}")
    print(f"written to {out / 'panel.csv'} (truth in truth.json)")
    return 0


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treesynth",
        description="Tree-based synthetic control: counterfactual prediction and inference for panel data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="aggregate a long event CSV into a weekly panel CSV")
    p.add_argument("--input", help="long event CSV (date, unit, count)")
    p.add_argument("--date-col", dest="date_col")
    p.add_argument("--unit-col", dest="unit_col")
    p.add_argument("--count-col", dest="count_col")
    p.add_argument("--start", help="anchor date of the first week (default: first date in data)")
    p.add_argument("--end", help="last calendar day of the window (default: last date in data)")
    p.add_argument("--merge", action="append", metavar="SRC[+SRC...]=TARGET",
                   help="sum the source units into one target unit; repeatable")
    p.add_argument("--summary", action="store_true", default=None,
                   help="print and write per-unit summary statistics")
    _add_common(p)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("fit", help="fit one estimator and report effects, uncertainty, and metrics")
    _add_panel_args(p)
    _add_estimator_args(p)
    p.add_argument("--n-boot", dest="n_boot", type=int, help="bootstrap replicates")
    p.add_argument("--boot-block-length", dest="boot_block_length", type=int)
    p.add_argument("--level", type=float, help="confidence level")
    _add_figures_arg(p)
    _add_common(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("placebo", help="rerun the pipeline with each control relabeled as treated")
    _add_panel_args(p)
    _add_estimator_args(p)
    p.add_argument("--exclude-multiplier", dest="exclude_multiplier", type=float,
                   help="exclude placebo units whose pre RMSPE exceeds this multiple of the main run")
    _add_figures_arg(p)
    _add_common(p)
    p.set_defaults(handler=cmd_placebo)

    p = sub.add_parser("conformal", help="permutation test of a null effect trajectory")
    _add_panel_args(p)
    _add_estimator_args(p)
    p.add_argument("--scheme", choices=("iid", "moving-block"))
    p.add_argument("--q", type=float, help="norm order of the statistic")
    p.add_argument("--n-samples", dest="n_samples", type=int,
                   help="random permutations for the iid scheme")
    p.add_argument("--null", help="'zero' or a CSV file with one value per post week")
    p.add_argument("--spec-test", dest="spec_test", action="store_true", default=None,
                   help="also run the backdated-onset specification test")
    p.add_argument("--kappa-max", dest="kappa_max", type=int)
    _add_figures_arg(p)
    _add_common(p)
    p.set_defaults(handler=cmd_conformal)

    p = sub.add_parser("compare", help="side-by-side metrics for all estimators")
    _add_panel_args(p)
    p.add_argument("--holdout", type=float,
                   help="pre-onset share held out for the validation table (0 disables)")
    p.add_argument("--trees", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--split-fraction", dest="split_fraction", type=float)
    _add_figures_arg(p)
    _add_common(p)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("simulate", help="generate a synthetic panel with known effect")
    p.add_argument("--dgp", choices=("linear", "interaction"))
    p.add_argument("--n-controls", dest="n_controls", type=int)
    p.add_argument("--t0", type=int)
    p.add_argument("--t-post", dest="t_post", type=int)
    p.add_argument("--beta", help="comma-separated coefficients")
    p.add_argument("--tau", type=float, help="injected constant effect")
    p.add_argument("--noise", type=float, help="half-width of the uniform outcome noise")
    p.add_argument("--ar-coef", dest="ar_coef", type=float)
    _add_common(p)
    p.set_defaults(handler=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return 2
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.handler(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TreeSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
