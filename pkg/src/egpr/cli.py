"""``egpr`` command-line interface.

Subcommands
-----------
synth      write a synthetic panel (CSV schema plus ground-truth sidecar)
run        online loop over the test span, then metrics and portfolio reports
sweep      (window, weight scheme) grid of R^2_pool / R^2_avg / IC
metrics    recompute the metrics report from stored predictions
portfolio  recompute the portfolio reports from stored predictions

A run is configured by one YAML or JSON file; ``--set a.b=value`` and the
dedicated flags override file values. The resolved configuration is embedded
in ``manifest.json``. Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numerical error. ``EGPR_WORKERS`` sets the worker count when no flag does.
"""

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
import pandas as pd
import yaml

from .ensemble import EQUAL, MSE
from .exceptions import ConfigError, DataError, EGPRError
from .gp import OptimizerConfig
from .kernel import KernelParams
from .metrics import (decile_copula, expanding_r2, ic_ttest, information_coefficient, ols_simple,
                      r2_avg, r2_pool, score_months, spearman)
from .panel import Panel, SynthConfig, read_panel, synthesize, write_panel
from .portfolio import PortfolioBook, build_portfolios
from .scheduler import ModelCache, PanelSource, RunState, SplitConfig, run, sweep

__all__ = ["main", "resolve_config", "DEFAULT_CONFIG"]

logger = logging.getLogger("egpr")

WORKERS_ENV = "EGPR_WORKERS"

DEFAULT_CONFIG = {
    "data": None,
    "synth": None,
    "output": "egpr_out",
    "seed": 0,
    "workers": 1,
    "lags": None,
    "split": {
        "train_start": None,
        "validation_start": None,
        "test_start": None,
        "test_end": None,
        "scheme": "rolling",
        "window": 96,
        "weight_scheme": MSE,
        "frozen": False,
    },
    "kernel": {"sigma": 1.0, "alpha": 0.1, "beta": 1.0, "noise_var": 1e-10},
    "optimizer": {"max_iter": 200, "gtol": 1e-6, "n_restarts": 3, "warm_start": True},
    "portfolio": {"gamma": 1.0, "diagonal": False},
    "sweep": {"windows": [12, 24, 48, "recursive"], "schemes": [MSE, EQUAL], "span": None},
}


# -- configuration ---------------------------------------------------------------

def _load_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _merge(base, update, prefix=""):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("synth", "lags"):
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from exc
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        if node.get(k) is None and k in ("synth", "lags"):
            node[k] = {}
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {path!r}")
        node = node[k]
    if node is not cfg and keys[0] in ("synth", "lags"):
        node[keys[-1]] = value
        return
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def resolve_config(path=None, overrides=(), **flags):
    """Defaults <- config file <- ``--set`` overrides <- dedicated flags / env."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        _merge(cfg, _load_file(path))
    for assignment in overrides:
        _apply_override(cfg, assignment)
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers and flags.get("workers") is None:
        flags["workers"] = env_workers
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    try:
        cfg["workers"] = int(cfg["workers"])
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workers and seed must be integers: {exc}") from exc
    if cfg["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    return cfg


def _synth_config(cfg):
    allowed = {f.name for f in fields(SynthConfig)}
    synth = dict(cfg.get("synth") or {})
    unknown = set(synth) - allowed
    if unknown:
        raise ConfigError(f"unknown synth settings {sorted(unknown)}")
    synth.setdefault("seed", cfg["seed"])
    return SynthConfig(**synth)


def _split(cfg, panel_months=None):
    s = dict(cfg["split"])
    if panel_months is not None:
        first, last = panel_months[0], panel_months[-1]
        s["train_start"] = first if s["train_start"] is None else s["train_start"]
        if s["test_end"] is None:
            s["test_end"] = last
        if s["test_start"] is None:
            s["test_start"] = first + (s["test_end"] - first) // 2
        if s["validation_start"] is None:
            s["validation_start"] = (s["train_start"] + s["test_start"]) // 2
    missing = [k for k, v in s.items() if v is None]
    if missing:
        raise ConfigError(f"split settings missing: {missing}")
    try:
        return SplitConfig(**s)
    except TypeError as exc:
        raise ConfigError(f"bad split settings: {exc}") from exc


def _kernel(cfg):
    try:
        return KernelParams(**cfg["kernel"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad kernel settings: {exc}") from exc


def _optimizer(cfg):
    try:
        return OptimizerConfig(**cfg["optimizer"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad optimizer settings: {exc}") from exc


# -- output helpers -----------------------------------------------------------------

def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")


def _read_csv(path, **kwargs):
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


def _load_panel(cfg, out_dir):
    if cfg.get("data"):
        raw = read_panel(cfg["data"])
    elif cfg.get("synth") is not None:
        raw = synthesize(_synth_config(cfg))
        write_panel(raw, os.path.join(out_dir, "data"))
    else:
        raise ConfigError("config needs either 'data' (panel directory) or 'synth' settings")
    return raw, Panel(raw, lags=cfg.get("lags"))


# -- reports ---------------------------------------------------------------------

PREDICTION_COLUMNS = ["month", "asset_id", "predicted_return", "predictive_variance",
                      "excess_log_return", "excess_simple_return", "market_cap"]


def _prediction_frame(preds, panel):
    frames = []
    for p in preds:
        sl = panel.slice(p.month)
        frames.append(pd.DataFrame({
            "month": p.month,
            "asset_id": p.asset_ids,
            "predicted_return": p.mixture.mean,
            "predictive_variance": p.mixture.var,
            "excess_log_return": sl.returns,
            "excess_simple_return": sl.simple_returns,
            "market_cap": p.market_caps,
        }))
    return pd.concat(frames, ignore_index=True)[PREDICTION_COLUMNS]


def _by_month(frame, *cols):
    months = sorted(frame["month"].unique())
    groups = {m: g for m, g in frame.groupby("month", sort=True)}
    return months, [[groups[m][c].to_numpy() for m in months] for c in cols]


def write_metrics(pred_df, out_dir, benchmark=None, truth=None):
    """Metrics report: per-month scores, summary, expanding R^2, copulas, OLS."""
    months, (p, r, caps) = _by_month(pred_df, "predicted_return", "excess_log_return", "market_cap")
    monthly = score_months(months, p, r)
    _write_csv(monthly, os.path.join(out_dir, "metrics_monthly.csv"))
    ic, rhos = information_coefficient(p, r)
    summary = {"r2_pool": r2_pool(p, r), "r2_avg": r2_avg(p, r), "ic": ic,
               "n_months": len(months), "n_obs": int(sum(x.size for x in r))}
    if len(rhos) >= 2:
        try:
            summary["ic_t"], summary["ic_p_one_sided"] = ic_ttest(rhos)
        except EGPRError as exc:
            logger.warning("IC t-test skipped: %s", exc)
    if truth is not None:
        t = truth.set_index(["month", "asset_id"])["conditional_mean"]
        keys = pd.MultiIndex.from_arrays([pred_df["month"], pred_df["asset_id"].astype(str)])
        f = t.reindex(keys).to_numpy()
        if not np.isnan(f).any():
            rr = pred_df["excess_log_return"].to_numpy()
            summary["oracle_r2_ceiling"] = float(1.0 - np.sum((rr - f) ** 2) / np.sum(rr**2))
            summary["share_of_ceiling"] = summary["r2_pool"] / summary["oracle_r2_ceiling"]
    _write_csv(expanding_r2(months, p, r), os.path.join(out_dir, "expanding_r2.csv"))

    labels = [f"D{i}" for i in range(1, 11)]
    for name, other in (("realized", r), ("market_cap", caps)):
        valid = [i for i, x in enumerate(p) if x.size >= 10]
        if valid:
            cop = decile_copula([p[i] for i in valid], [other[i] for i in valid])
            frame = pd.DataFrame(cop, index=labels, columns=labels).rename_axis("prediction_decile")
            frame.reset_index().to_csv(os.path.join(out_dir, f"copula_{name}.csv"),
                                       index=False, lineterminator="\n")
    cap_rho = [spearman(x, c) for x, c in zip(p, caps)]
    _write_csv(pd.DataFrame({"month": months, "spearman_market_cap": cap_rho}),
               os.path.join(out_dir, "spearman_market_cap.csv"))
    summary["mean_spearman_market_cap"] = float(np.mean(cap_rho))

    if benchmark is not None:
        bench = benchmark.reindex(months)
        ok = monthly["r2_t"].notna().to_numpy() & bench.notna().to_numpy()
        if ok.sum() >= 3:
            fit = ols_simple(monthly["r2_t"].to_numpy()[ok].astype(float), bench.to_numpy()[ok])
            summary["ols_r2_on_benchmark"] = {"slope": fit.slope, "intercept": fit.intercept,
                                              "se_slope": fit.se_slope,
                                              "se_intercept": fit.se_intercept, "n": fit.n}
    _write_json(summary, os.path.join(out_dir, "metrics_summary.json"))
    return summary


def _cov_path(out_dir, month):
    return os.path.join(out_dir, "covariance", f"month_{int(month):06d}.npy")


def write_portfolios(pred_df, out_dir, gamma=1.0, diagonal=False, workers=1):
    """Portfolio reports from a predictions frame (and stored covariances unless diagonal)."""
    months = sorted(pred_df["month"].unique())
    groups = {m: g for m, g in pred_df.groupby("month", sort=True)}

    def one(m):
        g = groups[m]
        Sigma = None
        if not diagonal:
            path = _cov_path(out_dir, m)
            if not os.path.exists(path):
                raise DataError(f"covariance file not found: {path}")
            Sigma = np.load(path)
        return build_portfolios(g["predicted_return"].to_numpy(), g["market_cap"].to_numpy(),
                                Sigma=Sigma, var=g["predictive_variance"].to_numpy(),
                                gamma=gamma, diagonal=diagonal)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            books = list(pool.map(one, months))
    else:
        books = [one(m) for m in months]
    pb = PortfolioBook(gamma=gamma, diagonal=diagonal)
    for m, book in zip(months, books):
        g = groups[m]
        pb.add_book(m, g["asset_id"].to_numpy(), book, g["predicted_return"].to_numpy(),
                    g["excess_log_return"].to_numpy(), g["excess_simple_return"].to_numpy())
    _write_csv(pb.weights_frame(), os.path.join(out_dir, "portfolio_weights.csv"))
    _write_csv(pb.returns_frame(), os.path.join(out_dir, "portfolio_returns.csv"))
    _write_csv(pb.stats(), os.path.join(out_dir, "portfolio_stats.csv"))
    pb.decile_r2().reset_index().to_csv(os.path.join(out_dir, "portfolio_r2.csv"),
                                        index=False, lineterminator="\n")
    _write_csv(pb.cumulative(), os.path.join(out_dir, "portfolio_cumulative.csv"))
    return pb


# -- subcommands -----------------------------------------------------------------------

def cmd_synth(cfg):
    out = _ensure_dir(cfg["output"])
    raw = synthesize(_synth_config(cfg))
    write_panel(raw, out)
    logger.info("wrote synthetic panel to %s", out)
    return 0


def _state(cfg, split, out, diagonal):
    return RunState(split=split, init=_kernel(cfg), opt_config=_optimizer(cfg), seed=cfg["seed"],
                    cache=ModelCache(os.path.join(out, "models")), diagonal=diagonal,
                    workers=cfg["workers"])


def cmd_run(cfg):
    out = _ensure_dir(cfg["output"])
    raw, panel = _load_panel(cfg, out)
    split = _split(cfg, panel.months)
    diagonal = bool(cfg["portfolio"]["diagonal"])
    state = _state(cfg, split, out, diagonal)
    preds = run(state, PanelSource(panel))

    pred_df = _prediction_frame(preds, panel)
    _write_csv(pred_df, os.path.join(out, "predictions.csv"))
    if not diagonal:
        _ensure_dir(os.path.join(out, "covariance"))
        for p in preds:
            np.save(_cov_path(out, p.month), p.mixture.cov)
    weights = []
    for p in preds:
        w = p.mixture.weights.to_frame().rename(columns={"month_id": "model_month"})
        w.insert(0, "month", p.month)
        weights.append(w)
    _write_csv(pd.concat(weights, ignore_index=True), os.path.join(out, "mixing_weights.csv"))
    if raw.benchmark is not None:
        _write_csv(raw.benchmark.rename_axis("month").reset_index(), os.path.join(out, "benchmark.csv"))
    if raw.truth is not None:
        _write_csv(raw.truth, os.path.join(out, "truth.csv"))

    summary = write_metrics(pred_df, out, benchmark=raw.benchmark, truth=raw.truth)
    write_portfolios(pred_df, out, gamma=cfg["portfolio"]["gamma"], diagonal=diagonal,
                     workers=cfg["workers"])
    manifest = state.manifest()
    manifest["config"] = {k: v for k, v in cfg.items() if k != "output"}
    _write_json(manifest, os.path.join(out, "manifest.json"))
    _write_json({"fit_seconds": {str(k): v for k, v in sorted(state.timings.items())},
                 "fits": state.fit_count, "cache_hits": state.cache.hits,
                 "cache_misses": state.cache.misses}, os.path.join(out, "timings.json"))
    logger.info("R2_pool %.5f  R2_avg %.5f  IC %.4f", summary["r2_pool"], summary["r2_avg"],
                summary["ic"])
    return 0


def _parse_windows(values):
    out = []
    for v in values:
        if isinstance(v, str) and v.strip().lower() == "recursive":
            out.append("recursive")
        else:
            try:
                out.append(int(v))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad window {v!r}") from exc
    return out


def cmd_sweep(cfg):
    out = _ensure_dir(cfg["output"])
    _, panel = _load_panel(cfg, out)
    split = _split(cfg, panel.months)
    sw = cfg["sweep"]
    span = tuple(sw["span"]) if sw.get("span") else (split.validation_start, split.test_start - 1)
    if len(span) != 2 or span[0] > span[1]:
        raise ConfigError(f"bad sweep span {span!r}")
    missing = [m for m in range(span[0], span[1] + 1) if m not in panel.months]
    if missing:
        raise DataError(f"sweep span months not in panel: {missing[:5]}")
    for s in sw["schemes"]:
        if s not in (MSE, EQUAL):
            raise ConfigError(f"unknown weight scheme {s!r}")
    cache = ModelCache(os.path.join(out, "models"))
    table, cache = sweep(panel, _parse_windows(sw["windows"]), list(sw["schemes"]), span, split,
                         init=_kernel(cfg), opt_config=_optimizer(cfg), seed=cfg["seed"],
                         cache=cache, workers=cfg["workers"])
    _write_csv(table, os.path.join(out, "sweep.csv"))
    _write_json({"config": {k: v for k, v in cfg.items() if k != "output"}, "span": list(span)}, os.path.join(out, "manifest.json"))
    _write_json({"cache_hits": cache.hits, "cache_misses": cache.misses, "models": len(cache)},
                os.path.join(out, "timings.json"))
    return 0


def _stored_predictions(out):
    df = _read_csv(os.path.join(out, "predictions.csv"), dtype={"asset_id": str})
    missing = [c for c in PREDICTION_COLUMNS if c not in df]
    if missing:
        raise DataError(f"{os.path.join(out, 'predictions.csv')}: missing columns {missing}")
    return df


def cmd_metrics(cfg):
    out = cfg["output"]
    df = _stored_predictions(out)
    bench_path = os.path.join(out, "benchmark.csv")
    bench = _read_csv(bench_path).set_index("month")["benchmark_excess_return"] \
        if os.path.exists(bench_path) else None
    truth_path = os.path.join(out, "truth.csv")
    truth = _read_csv(truth_path, dtype={"asset_id": str}) if os.path.exists(truth_path) else None
    write_metrics(df, out, benchmark=bench, truth=truth)
    return 0


def cmd_portfolio(cfg):
    out = cfg["output"]
    write_portfolios(_stored_predictions(out), out, gamma=cfg["portfolio"]["gamma"],
                     diagonal=bool(cfg["portfolio"]["diagonal"]), workers=cfg["workers"])
    return 0


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "sweep": cmd_sweep, "metrics": cmd_metrics,
            "portfolio": cmd_portfolio}


def build_parser():
    parser = argparse.ArgumentParser(prog="egpr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__ or name)
        p.add_argument("-c", "--config", help="YAML or JSON config file")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--data", help="panel directory (CSV schema)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help=f"worker count (default: ${WORKERS_ENV} or 1)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. split.window=48")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, output=args.output, data=args.data,
                             seed=args.seed, workers=args.workers)
        return COMMANDS[args.command](cfg)
    except EGPRError as exc:
        print(f"egpr {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
