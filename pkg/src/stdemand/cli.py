"""Command-line interface: ``stdemand simulate | fit | predict | evaluate | export-grid``.

Exit codes are 0 on success, 1 when a command fails at run time and 2 for
usage or configuration errors. Every option can also come from a flat JSON
``--config`` file keyed by the option's long name (dashes or underscores);
flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    DEFAULT_ORIGIN,
    NORMALIZATION_GRID,
    EventLog,
    SpatialDomain,
    TimeGrid,
    rasterize,
    read_events_csv,
    split_log,
    write_events_csv,
)
from .simulate import SCENARIOS, make_scenario, sample_log

logger = logging.getLogger("stdemand")

METHODS = ("gmm", "stkde", "warp", "medic", "naivekde")
STOCHASTIC = {"gmm", "warp"}


class UsageError(Exception):
    """Bad flags, config values or input paths (exit code 2)."""


# --------------------------------------------------------------------------
# option handling
# --------------------------------------------------------------------------


def _csv_floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_words(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


# long option -> (type, default); applied after the config file is merged
_DEFAULTS = {
    "weeks": (int, None),
    "scenario": (str, None),
    "method": (str, None),
    "truth": (str, None),
    "domain": (str, None),
    "model": (str, None),
    "period": (int, None),
    "nx": (int, NORMALIZATION_GRID),
    "ny": (int, NORMALIZATION_GRID),
    "models": (_csv_words, ["gmm", "stkde", "naivekde", "medic"]),
    "train_weeks": (int, 8),
    "test_weeks": (int, 4),
    "grid_dir": (str, None),
    "components": (int, 5),
    "iterations": (int, 600),
    "burn_in": (int, 300),
    "bandwidth": (float, None),
    "weeks_back": (int, 8),
    "weight_floor": (float, 1e-6),
    "deformation": (float, 1.0),
    "lambda_grid": (_csv_floats, None),
    "h_grid": (_csv_floats, None),
    "cv_folds": (int, 2),
    "n_cloud": (int, 1000),
    "neighbors": (int, 5),
    "medic_weeks": (int, 4),
    "medic_years": (int, 1),
    "epsilon": (float, 0.25),
    "cell_size": (float, 1.0),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdemand", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, input_help=None):
        p.add_argument("--input", help=input_help or "event CSV (timestamp,x_km,y_km)")
        p.add_argument("--output", help="output path")
        p.add_argument("--seed", type=int, help="master seed for every random sub-stream")
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--domain", help="JSON with a bbox (and optional mask), or a ground-truth JSON")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    def model_flags(p):
        g = p.add_argument_group("model hyperparameters")
        g.add_argument("--components", type=int, help="GMM mixture components m (default 5)")
        g.add_argument("--iterations", type=int, help="GMM MCMC iterations (default 600)")
        g.add_argument("--burn-in", type=int, help="GMM burn-in draws (default 300)")
        g.add_argument("--bandwidth", type=float, help="kernel bandwidth in km (default: Silverman rule)")
        g.add_argument("--weeks-back", type=int, help="kernel history window in weeks (default 8)")
        g.add_argument("--weight-floor", type=float, help="stKDE relative weight floor (default 1e-6)")
        g.add_argument("--deformation", type=float, help="WARP lambda when no grid is given (default 1)")
        g.add_argument("--lambda-grid", type=_csv_floats, help="WARP lambda grid for cross-validation")
        g.add_argument("--h-grid", type=_csv_floats, help="WARP bandwidth grid for cross-validation")
        g.add_argument("--cv-folds", type=int, help="rolling-origin folds (default 2)")
        g.add_argument("--n-cloud", type=int, help="WARP point-cloud size (default 1000)")
        g.add_argument("--neighbors", type=int, help="WARP nearest neighbours per node (default 5)")
        g.add_argument("--medic-weeks", type=int, help="MEDIC weeks averaged (default 4)")
        g.add_argument("--medic-years", type=int, help="MEDIC 52-week years averaged (default 1)")
        g.add_argument("--epsilon", type=float, help="MEDIC pseudo-count per cell (default 0.25)")
        g.add_argument("--cell-size", type=float, help="MEDIC cell side in km (default 1)")

    p = common(sub.add_parser("simulate", help="sample an event log from a synthetic scenario"))
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--weeks", type=int)
    p.add_argument("--truth", help="ground-truth JSON path (default: <output>.truth.json)")

    p = common(sub.add_parser("fit", help="fit one method and write a JSON model artifact"))
    p.add_argument("--method", choices=METHODS)
    model_flags(p)

    p = common(sub.add_parser("predict", help="predictive density at each event of a future log"),
               "event CSV of future events to score")
    p.add_argument("--model", help="model artifact from `fit`")

    p = common(sub.add_parser("evaluate", help="hold out the final weeks and rank methods"))
    p.add_argument("--models", type=_csv_words, help="comma-separated methods (default gmm,stkde,naivekde,medic)")
    p.add_argument("--train-weeks", type=int, help="training weeks before the test block (default 8)")
    p.add_argument("--test-weeks", type=int, help="held-out final weeks (default 4)")
    p.add_argument("--grid-dir", help="also export a density grid per model for the first test period")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    model_flags(p)

    p = common(sub.add_parser("export-grid", help="rasterize a fitted model for one period"),
               "unused; the model carries its own data")
    p.add_argument("--model", help="model artifact from `fit`")
    p.add_argument("--period", type=int, help="period index (hours since the CSV origin)")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    return parser


def resolve_options(args) -> argparse.Namespace:
    """Merge ``--config`` values under the command-line flags, then fill defaults."""
    merged = dict(vars(args))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key not in merged and key not in _DEFAULTS:
                raise UsageError(f"{path}: unknown option {key!r}")
            if merged.get(key) is None:
                conv = _DEFAULTS.get(key, (None,))[0]
                if conv in (_csv_floats, _csv_words) and isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                try:
                    merged[key] = value if conv is None or value is None else conv(value)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as err:
                    raise UsageError(f"{path}: bad value for {key!r}: {err}") from None
    for key, (_, default) in _DEFAULTS.items():
        if merged.get(key) is None:
            merged[key] = default
    return argparse.Namespace(**merged)


def _require(opts, *names):
    for name in names:
        if getattr(opts, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _input_path(path, what="input"):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_domain(path):
    if path is None:
        return None
    data = json.loads(_input_path(path, "domain").read_text())
    if "domain" in data:
        data = data["domain"]
    if "bbox" not in data:
        raise UsageError(f"{path}: no bbox found")
    return SpatialDomain.from_dict(data)


def _estimator(method, opts):
    from .io import make_estimator

    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method in STOCHASTIC and opts.seed is None:
        raise UsageError(f"--seed is required for the stochastic method {method!r}")
    seed = opts.seed if opts.seed is not None else 0
    if method == "gmm":
        return make_estimator("gmm", n_components=opts.components, n_iter=opts.iterations,
                              burn_in=opts.burn_in, random_state=seed)
    if method == "stkde":
        return make_estimator("stkde", bandwidth=opts.bandwidth, weeks_back=opts.weeks_back,
                              weight_floor=opts.weight_floor)
    if method == "warp":
        return make_estimator("warp", deformation=opts.deformation, bandwidth=opts.bandwidth,
                              n_cloud=opts.n_cloud, weeks_back=opts.weeks_back,
                              n_neighbors=opts.neighbors, random_state=seed,
                              lambda_grid=opts.lambda_grid, bandwidth_grid=opts.h_grid,
                              cv_folds=opts.cv_folds)
    if method == "medic":
        return make_estimator("medic", weeks=opts.medic_weeks, years=opts.medic_years,
                              epsilon=opts.epsilon, cell_size=opts.cell_size)
    return make_estimator("naivekde", bandwidth=opts.bandwidth, weeks_back=opts.weeks_back)


def _read_log(opts, grid=None, domain=None):
    path = _input_path(opts.input)
    domain = domain or _load_domain(opts.domain)
    return read_events_csv(path, grid=grid, domain=domain)


def _echo(summary):
    print(json.dumps(summary, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(opts):
    _require(opts, "scenario", "weeks", "seed", "output")
    if opts.weeks < 1:
        raise UsageError(f"--weeks must be at least 1, got {opts.weeks}")
    if opts.seed < 0:
        raise UsageError("--seed must be non-negative")
    truth = make_scenario(opts.scenario, opts.weeks, opts.seed)
    log = sample_log(truth, opts.seed)
    out = Path(opts.output)
    write_events_csv(log, out)
    truth_path = Path(opts.truth) if opts.truth else out.with_suffix(".truth.json")
    truth_path.write_text(json.dumps(truth.to_dict(), indent=1) + "\n")
    _echo({"command": "simulate", "scenario": opts.scenario, "weeks": opts.weeks, "seed": opts.seed,
           "events": len(log), "output": str(out), "truth": str(truth_path)})


def cmd_fit(opts):
    from .io import save_model

    _require(opts, "method", "output")
    est = _estimator(opts.method, opts)
    log = _read_log(opts)
    t0 = time.perf_counter()
    est.fit(log)
    path = save_model(est, opts.output)
    summary = {"command": "fit", "method": opts.method, "seed": opts.seed, "events": len(log),
               "periods": log.grid.T, "seconds": round(time.perf_counter() - t0, 3), "output": str(path)}
    if opts.method == "warp" and est.cv_ is not None:
        summary.update({"lambda": est.cv_.lam, "bandwidth": est.cv_.h, "cv_score": est.cv_.score})
    _echo(summary)


def _load(opts):
    from .io import load_model

    return load_model(_input_path(opts.model, "model"))


def _model_span(est):
    """Training grid and domain of a fitted estimator."""
    d = est.to_dict()
    return TimeGrid.from_dict(d["grid"]), SpatialDomain.from_dict(d["domain"])


def cmd_predict(opts):
    _require(opts, "output")
    est = _load(opts)
    grid, domain = _model_span(est)
    raw = read_events_csv(_input_path(opts.input), domain=domain)
    if len(raw) == 0:
        raise UsageError(f"{opts.input} holds no events")
    log = EventLog(raw.t, raw.xy, TimeGrid(max(raw.grid.T, int(raw.t[-1]) + 1)), domain)
    model = est.predict(range(int(log.t[0]), int(log.t[-1]) + 1))
    values = np.empty(len(log))
    for t in np.unique(log.t):
        sel = log.t == t
        values[sel] = model.evaluate(log.xy[sel], int(t))
    with Path(opts.output).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "x_km", "y_km", "t", "density"])
        for t, (x, y), v in zip(log.t.tolist(), log.xy.tolist(), values.tolist()):
            stamp = (DEFAULT_ORIGIN + dt.timedelta(hours=t)).isoformat()
            writer.writerow([stamp, repr(x), repr(y), t, repr(v)])
    seed = opts.seed if opts.seed is not None else est.get_params().get("random_state")
    _echo({"command": "predict", "method": est.method, "seed": seed, "events": len(log),
           "output": opts.output})


def cmd_export_grid(opts):
    _require(opts, "period", "output")
    est = _load(opts)
    density = est.predict(opts.period)
    grid = rasterize(density, opts.period, opts.nx, opts.ny)
    grid.metadata.update({"method": est.method, "seed": opts.seed})
    grid.to_csv(opts.output)
    _echo({"command": "export-grid", "method": est.method, "seed": opts.seed, "period": opts.period,
           "nx": opts.nx, "ny": opts.ny, "output": opts.output})


def cmd_evaluate(opts):
    from .evaluation import compare, weekly_mean_volume

    _require(opts, "output")
    methods = list(dict.fromkeys(opts.models))
    if len(methods) < 2:
        raise UsageError("--models needs at least two methods")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if opts.seed is None and STOCHASTIC.intersection(methods):
        raise UsageError("--seed is required when evaluating gmm or warp")
    if opts.train_weeks < 1 or opts.test_weeks < 1:
        raise UsageError("--train-weeks and --test-weeks must be at least 1")
    log = _read_log(opts)
    B = log.grid.B
    weeks = log.grid.T // B
    if weeks < opts.test_weeks + 1:
        raise UsageError(f"the log spans {weeks} weeks; need more than --test-weeks={opts.test_weeks}")
    T_split = (weeks - opts.test_weeks) * B
    T_end = weeks * B
    train, rest = split_log(log, T_split)
    test = rest.window(T_split, T_end)
    start = max(0, T_split - opts.train_weeks * B)
    train = train.shifted(start)
    test = test.shifted(start)
    periods = range(T_split - start, T_end - start)
    models = {}
    for m in methods:
        t0 = time.perf_counter()
        est = _estimator(m, opts).fit(train)
        models[m] = est.predict(periods)
        logger.info("fitted %s in %.1fs", m, time.perf_counter() - t0)
    meta = {"seed": opts.seed, "input": str(opts.input), "train_weeks": opts.train_weeks,
            "test_weeks": opts.test_weeks, "train_periods": [start, T_split],
            "test_periods": [T_split, T_end]}
    report = compare(models, test, delta_hat=weekly_mean_volume(train), periods=periods, metadata=meta)
    out = Path(opts.output)
    json_path = out.with_suffix(".json")
    text_path = out.with_suffix(".txt")
    json_path.write_text(report.to_json())
    text_path.write_text(report.to_text())
    sys.stdout.write(report.to_text())
    if opts.grid_dir:
        gdir = Path(opts.grid_dir)
        gdir.mkdir(parents=True, exist_ok=True)
        for m, density in models.items():
            g = rasterize(density, periods.start, opts.nx, opts.ny)
            g.metadata.update({"method": m, "seed": opts.seed, "t": periods.start + start})
            g.to_csv(gdir / f"{m}.csv")
    _echo({"command": "evaluate", "seed": opts.seed, "ranking": report.ranking(),
           "json": str(json_path), "text": str(text_path)})


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "export-grid": cmd_export_grid,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        COMMANDS[opts.command](opts)
    except UsageError as err:
        print(f"stdemand {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report any run-time failure as exit 1
        logger.debug("command failed", exc_info=True)
        print(f"stdemand {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
