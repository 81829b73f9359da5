"""Command-line entry point.

    loadtune gen-data --hours 2000 --seed 7 --out d.csv
    loadtune tune --algo de --data d.csv --budget 60 --seed 1 --epoch-cap 30 --out report/
    loadtune train --data d.csv --tune-report report/tune_de.json --out model.npz
    loadtune forecast --model model.npz --data d.csv --start 3 --out fc.csv
    loadtune export-plots --kind nth_hour --model model.npz --data d.csv --out nth.csv
    loadtune bench --suite sphere --algo de --seed 3
    loadtune report report/*.json

Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric/divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import benchmarks, evo
from .data import (PreparedData, ScalerState, SplitSpec,
                   atomic_write_text, clean, generate_synthetic, load_csv,
                   make_windows, prepare, split, write_csv, write_npz)
from .errors import (ConfigError, DataQualityError, EmptyDatasetError,
                     ForecastRangeError, IngestError, NumericError,
                     OptimizationError, UsageError)
from .forecaster import (ForecastModel, Hyperparams, ModelConfig, TrainReport,
                         build_model, fit, rolling_forecast)
from .metrics import mape
from .tuner import (MANUAL_DEFAULT, SearchSpace, TuneReport, baseline_report,
                    effective, report_render, tune)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


# ----------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------


def _model_config(args) -> ModelConfig:
    if args.model_size == "small":
        return ModelConfig.small(residual=args.residual)
    return ModelConfig(residual=args.residual)


def _split_spec(args, records) -> SplitSpec:
    if args.train_end is None and args.test_end is None:
        return SplitSpec.auto(records, val_fraction=args.val_fraction)
    if args.train_end is None or args.test_end is None:
        raise ConfigError("--train-end and --test-end must be given together")
    return SplitSpec(args.train_end, args.test_end, args.val_fraction)


def _prepare(args) -> PreparedData:
    records = clean(load_csv(args.data))
    return prepare(records, _split_spec(args, records))


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _partition_windows(model: ForecastModel, data_path, partition: str):
    """Re-window one partition of ``data_path`` with the scaler stored in the model."""
    meta = model.metadata
    if "scaler" not in meta:
        raise ConfigError("model bundle carries no scaler; train it with the `train` command")
    scaler = ScalerState.from_dict(meta["scaler"])
    spec = SplitSpec(**meta["split"])
    parts = dict(zip(("train", "val", "test"), split(clean(load_csv(data_path)), spec)))
    cfg = model.config
    return make_windows(parts[partition], scaler, tuple(meta["features"]),
                        cfg.lookback_steps, cfg.horizon)


def _forecast_rows(fc):
    return [f"{h},{_fmt(a)},{_fmt(p)}" for h, a, p in fc.rows()]


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_gen_data(args):
    df = generate_synthetic(args.hours, args.seed, noise=args.noise)
    write_csv(df, args.out)
    print(f"wrote {len(df)} rows to {args.out}")


def cmd_preprocess(args):
    data = _prepare(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = data.take_test()
    arrays = {}
    for name, ds in (("train", data.train), ("val", data.val), ("test", test)):
        arrays[f"{name}_inputs"] = ds.inputs
        arrays[f"{name}_targets"] = ds.targets
        arrays[f"{name}_row_index"] = ds.row_index
    write_npz(out / "windows.npz", arrays)
    summary = {
        "split": data.split.to_dict(),
        "features": list(data.features),
        "scaler": data.scaler.to_dict(),
        "windows": {"train": len(data.train), "val": len(data.val), "test": len(test)},
    }
    _write_json(out / "preprocess.json", summary)
    print(json.dumps(summary["windows"]))


def cmd_tune(args):
    data = _prepare(args)
    cfg = _model_config(args)
    if args.algo == "manual":
        report = baseline_report(MANUAL_DEFAULT, data, args.seed, cfg, args.epoch_cap)
    else:
        report = tune(args.algo, data, args.budget, args.seed, SearchSpace(), cfg,
                      epoch_cap=args.epoch_cap, pop_size=args.pop_size, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"tune_{args.algo}.json", report.to_json())
    lines = ["generation,best_fitness"]
    lines += [f"{g},{'' if h is None else _fmt(h)}" for g, h in enumerate(report.history)]
    atomic_write_text(out / f"history_{args.algo}.csv", "\n".join(lines) + "\n")
    print(report_render([report]), end="")


def cmd_train(args):
    data = _prepare(args)
    if args.tune_report:
        tuned = TuneReport.from_dict(json.loads(Path(args.tune_report).read_text()))
        hp = tuned.best
        cfg = ModelConfig(**tuned.settings["model_config"]) if "model_config" in tuned.settings \
            else _model_config(args)
    else:
        hp = Hyperparams(args.batch_size, args.epochs, args.lr)
        cfg = _model_config(args)
    hp = effective(hp, args.epoch_cap)
    model = build_model(cfg, args.seed)
    report = fit(model, data.train, data.val, hp, args.seed)
    model.metadata = {
        "scaler": data.scaler.to_dict(),
        "split": data.split.to_dict(),
        "features": list(data.features),
        "hyperparams": asdict(hp),
        "seed": args.seed,
    }
    model.save(args.out)
    report_path = args.train_report or str(Path(args.out).with_suffix(".train.json"))
    _write_json(report_path, report.to_dict())
    print(f"trained {report.epochs_run} epochs: train {report.train_loss[-1]:.5f} "
          f"val {report.val_loss[-1]:.5f} -> {args.out}")


def cmd_forecast(args):
    model = ForecastModel.load(args.model)
    ds = _partition_windows(model, args.data, args.partition)
    start = args.start if args.start is not None else int(ds.row_index[0])
    fc = rolling_forecast(model, ds, start, model.config.horizon)
    text = "hour_index,actual_mw,predicted_mw\n" + "\n".join(_forecast_rows(fc)) + "\n"
    atomic_write_text(args.out, text)
    print(f"MAPE over hours {start}..{start + model.config.horizon - 1}: "
          f"{mape(fc.actual, fc.predicted):.2f}%")


def cmd_export_plots(args):
    if args.kind == "loss_curve":
        if not args.report:
            raise ConfigError("loss_curve needs --report (a train or tune report)")
        payload = json.loads(Path(args.report).read_text())
        if "final_train" in payload:
            payload = payload["final_train"] or {}
        curve = TrainReport.from_dict(payload)
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{_fmt(t)},{_fmt(v)}"
                  for e, (t, v) in enumerate(zip(curve.train_loss, curve.val_loss), start=1)]
        atomic_write_text(args.out, "\n".join(lines) + "\n")
        return
    if not (args.model and args.data):
        raise ConfigError(f"{args.kind} needs --model and --data")
    model = ForecastModel.load(args.model)
    ds = _partition_windows(model, args.data, args.partition)
    horizon = model.config.horizon
    if args.kind == "forecast24":
        start = args.n[0] if args.n else int(ds.row_index[0])
        fc = rolling_forecast(model, ds, start, horizon)
        lines = ["hour_index,actual_mw,predicted_mw", *_forecast_rows(fc),
                 f"# mape_percent,{mape(fc.actual, fc.predicted):.4f}"]
    else:
        starts = args.n if args.n else [int(n) for n in ds.row_index]
        lines = ["start_n,hour_index,actual_mw,predicted_mw"]
        for n in starts:
            fc = rolling_forecast(model, ds, n, horizon)
            lines += [f"{n},{row}" for row in _forecast_rows(fc)]
    atomic_write_text(args.out, "\n".join(lines) + "\n")


def cmd_bench(args):
    fn, dim, bounds, n, gens, threshold = benchmarks.SUITES[args.suite]
    objective = evo.Objective(fn, bounds)
    started = time.perf_counter()
    if args.algo == "de":
        result = evo.de_run(evo.DEConfig(pop_size=n, max_generations=gens, seed=args.seed), objective)
    elif args.algo == "pso":
        result = evo.pso_run(evo.PSOConfig(swarm_size=n, iterations=gens, seed=args.seed), objective)
    elif args.algo == "ga":
        result = evo.ga_run(evo.GAConfig(pop_size=n, generations=gens, seed=args.seed), objective)
    else:
        result = evo.random_run(objective, n * (gens + 1), seed=args.seed, batch_size=n)
    elapsed = time.perf_counter() - started
    ok = result.best.fitness <= threshold
    print(f"suite={args.suite} algo={args.algo} seed={args.seed} dim={dim} "
          f"evaluations={result.evaluations} best={result.best.fitness:.6e} "
          f"threshold={threshold:.1e} {'PASS' if ok else 'FAIL'}")
    logging.getLogger(__name__).info("bench wall time %.3fs", elapsed)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args):
    reports = [TuneReport.from_dict(json.loads(Path(p).read_text())) for p in args.reports]
    table = report_render(reports)
    if args.out:
        atomic_write_text(args.out, table)
    print(table, end="")


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--data", required=True, help="hourly load CSV")
    p.add_argument("--train-end", help="last training day (YYYY-MM-DD); default: auto 75%% cut")
    p.add_argument("--test-end", help="last test day (YYYY-MM-DD)")
    p.add_argument("--val-fraction", type=float, default=0.25)


def _add_model_args(p):
    p.add_argument("--model-size", choices=("paper", "small"), default="paper")
    p.add_argument("--residual", action="store_true", help="skip connection around attention")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loadtune", description="Metaheuristic-tuned transformer load forecasting")
    parser.add_argument("--config", help="JSON file of option defaults (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic load CSV")
    p.add_argument("--hours", type=int, default=8760)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="clean, split, scale and window a CSV")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("tune", help="search batch size / epochs / learning rate")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--algo", choices=(*evo.ALGORITHMS, "manual"), required=True)
    p.add_argument("--budget", type=int, default=60)
    p.add_argument("--pop-size", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch-cap", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="train one model and save the bundle")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--tune-report", help="take hyperparameters from a tune report")
    p.add_argument("--batch-size", type=int, default=MANUAL_DEFAULT.batch_size)
    p.add_argument("--epochs", type=int, default=MANUAL_DEFAULT.epochs)
    p.add_argument("--lr", type=float, default=MANUAL_DEFAULT.learning_rate)
    p.add_argument("--epoch-cap", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model bundle path (.npz)")
    p.add_argument("--train-report", help="loss-curve JSON path (default: <out>.train.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="24-hour forecast starting at hour N")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--start", type=int, default=None, help="row N within the partition")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("export-plots", help="write plot-ready CSV data")
    p.add_argument("--kind", choices=("loss_curve", "forecast24", "nth_hour"), required=True)
    p.add_argument("--report", help="train/tune report JSON (loss_curve)")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--n", type=int, nargs="*", help="start hour(s) N; default: first (forecast24) or all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("bench", help="run a metaheuristic on an analytic objective")
    p.add_argument("--suite", choices=tuple(benchmarks.SUITES), required=True)
    p.add_argument("--algo", choices=evo.ALGORITHMS, default="de")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render tune reports as a comparison table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(parser, argv, path):
    """Install config-file values as subcommand defaults so explicit flags win.

    Keys may sit at the top level or under a section named after the command.
    """
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return
    section = dict(cfg.get(command, {}))
    flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    subparser = choices[command]
    known = {a.dest for a in subparser._actions}
    values = {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for action in subparser._actions:
        if action.dest in values:
            action.required = False
    subparser.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, argv, known.config)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args)
        return EXIT_OK if code is None else code
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, DataQualityError, EmptyDatasetError, ForecastRangeError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, OptimizationError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
