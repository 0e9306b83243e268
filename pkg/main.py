"""
main.py — Command-line entry point for the crowd-flow forecasting engine.

Usage:
    python main.py synth     --config synth.json --out-dir data/
    python main.py flows     --in traj.csv --grid grid.json --out flows.flw
    python main.py train     --config train.json
    python main.py predict   --checkpoint model.strn --grid grid.json --flows flows.flw --out pred.flw
    python main.py evaluate  --checkpoint model.strn --grid grid.json --flows flows.flw
    python main.py evaluate  --experiment experiments/fusion_vs_sum.json
    python main.py serve     --config pipeline.json
    python main.py heatmap   --flows flows.flw --grid grid.json --t 100 --out t100.ppm
    python main.py pipeline  --config pipeline.json --ticks 10

Exit codes: 0 success, 1 usage error (bad flags or invalid JSON config), 2 runtime error.
"""
import argparse
import json
import logging
import os
import sys

from pydantic import ValidationError

from config import LOG_PATH, REPORTS_DIR


# ── Logging setup ──────────────────────────────────────────────────────────────

def setup_logging(verbose: bool = False) -> None:
    os.makedirs(os.path.dirname(LOG_PATH), exist_ok=True)
    fmt = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    datefmt = "%Y-%m-%d %H:%M:%S"

    handlers = [
        logging.StreamHandler(sys.stdout),
        logging.FileHandler(LOG_PATH, encoding="utf-8"),
    ]
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=fmt,
        datefmt=datefmt,
        handlers=handlers,
        force=True,
    )


class UsageError(Exception):
    """Bad combination of flags detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No JSON document at {path}.")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from exc


# ── Subcommands ────────────────────────────────────────────────────────────────

def cmd_synth(args: argparse.Namespace) -> None:
    from data_manager import save_grid, save_series, write_externals_csv, write_trajectory_csv
    from synthcity import SynthConfig, generate, verify_consistency

    logger = logging.getLogger(__name__)
    cfg = SynthConfig.model_validate(_read_json(args.config))
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    result = generate(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    save_grid(cfg.grid, os.path.join(args.out_dir, "grid.json"))
    write_trajectory_csv(result.trajectories, os.path.join(args.out_dir, "trajectories.csv"))
    write_externals_csv(result.externals, os.path.join(args.out_dir, "externals.csv"))
    save_series(result.truth, os.path.join(args.out_dir, "flows.flw"))
    logger.info("Synthetic city written to %s", args.out_dir)

    if args.verify:
        report = verify_consistency(cfg, result.csv_bytes)
        if not report.equal:
            raise RuntimeError(
                f"recounted flows differ from the simulator in {len(report.mismatched)} interval(s)"
            )
        logger.info("Consistency check passed over %d interval(s).", report.n_intervals)


def cmd_flows(args: argparse.Namespace) -> None:
    from data_manager import load_grid, read_trajectory_csv, save_series
    from flowgrid import build_series

    grid = load_grid(args.grid)
    if not os.path.isfile(args.input):
        raise FileNotFoundError(f"No trajectory CSV at {args.input}.")
    coverage = [(args.start, args.end)] if args.start is not None and args.end is not None else None
    series = build_series(grid, read_trajectory_csv(args.input), coverage=coverage)
    save_series(series, args.out)
    logging.getLogger(__name__).info(
        "Flows: %d interval(s) in %d segment(s) → %s", len(series), len(series.segments), args.out,
    )


def cmd_train(args: argparse.Namespace) -> None:
    from checkpoint import save_checkpoint
    from data_manager import load_grid, load_series, read_externals_csv
    from externals import ExternalSchema
    from report_generator import write_history_csv
    from trainer import TrainConfig, external_vectors, make_instances, train

    logger = logging.getLogger(__name__)
    cfg = TrainConfig.model_validate(_read_json(args.config))
    overrides = {
        k: v for k, v in {
            "grid_path": args.grid,
            "flows_path": args.flows,
            "externals_path": args.externals,
            "checkpoint_path": args.checkpoint,
            "history_path": args.history,
            "seed": args.seed,
        }.items() if v is not None
    }
    cfg = cfg.model_copy(update=overrides)
    if args.max_epochs is not None:
        cfg = cfg.model_copy(update={"hyper": cfg.hyper.model_copy(update={"max_epochs": args.max_epochs})})
    for name in ("grid_path", "flows_path", "checkpoint_path"):
        if getattr(cfg, name) is None:
            raise UsageError(f"train needs '{name}' in the config or as a flag")

    grid = load_grid(cfg.grid_path)
    series = load_series(cfg.flows_path, grid)
    records = read_externals_csv(cfg.externals_path) if cfg.externals_path else []
    schema = ExternalSchema.fit(records, cfg.n_weather, cfg.holidays)
    use_ext = cfg.use_externals and bool(records)
    if cfg.use_externals and not records:
        logger.warning("No externals supplied; training without the external component.")
    model_cfg = cfg.model_config_for(grid, schema.dim if use_ext else 0)

    ext = external_vectors(grid, records, schema, series.indices()) if use_ext else None
    dataset = make_instances(series, ext, model_cfg)
    result = train(dataset, model_cfg, cfg.hyper, cfg.seed)

    metadata = {
        "external_schema": schema.model_dump(mode="json") if use_ext else None,
        "best_val_rmse": result.best_val_rmse,
        "final_val_rmse": result.final_val_rmse,
        "best_epoch": result.best_epoch,
        "hyper": cfg.hyper.model_dump(mode="json"),
        "seed": cfg.seed,
    }
    save_checkpoint(result.params, result.stats, model_cfg, cfg.checkpoint_path, metadata)
    history_path = cfg.history_path or os.path.splitext(cfg.checkpoint_path)[0] + "_history.csv"
    write_history_csv(result.history, history_path)
    logger.info(
        "Trained on %d instance(s), validated on %d; val RMSE %.4f; checkpoint %s",
        result.n_train, result.n_val, result.final_val_rmse, cfg.checkpoint_path,
    )


def cmd_predict(args: argparse.Namespace) -> None:
    from checkpoint import load_checkpoint
    from data_manager import load_grid, load_series, read_externals_csv
    from forecaster import LoadedModel, export_forecasts, future_externals, predict_multi

    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    grid = load_grid(args.grid)
    model = LoadedModel.from_checkpoint(load_checkpoint(args.checkpoint))
    series = load_series(args.flows, grid)
    if series.latest_index is None:
        raise ValueError(f"{args.flows} holds no flows")
    vectors = None
    if model.config.ext_dim > 0:
        if model.schema is None:
            raise ValueError("checkpoint has an external component but no external schema")
        known = read_externals_csv(args.externals) if args.externals else []
        _, vectors = future_externals(
            args.policy, grid, model.schema, series.latest_index + 1, args.steps, known,
        )
    records = predict_multi(model, series, vectors, args.steps)
    export_forecasts(records, grid, args.out)


def cmd_evaluate(args: argparse.Namespace) -> None:
    logger = logging.getLogger(__name__)
    if args.experiment:
        from evaluator import ExperimentSpec, run_experiment
        from report_generator import write_experiment_report

        spec = ExperimentSpec.model_validate(_read_json(args.experiment))
        report = run_experiment(spec)
        paths = write_experiment_report(report, args.out_dir)
        logger.info("Experiment report: %s", paths["markdown"])
        return

    if not args.checkpoint:
        raise UsageError("evaluate needs --experiment or --checkpoint")
    from checkpoint import load_checkpoint
    from evaluator import evaluate_checkpoint, fusion_weight_stats_from_params
    from heatmap import export_weight_maps
    from report_generator import write_fusion_summary

    ckpt = load_checkpoint(args.checkpoint)
    if args.flows:
        from data_manager import load_grid, load_series, read_externals_csv

        if not args.grid:
            raise UsageError("--flows needs --grid")
        series = load_series(args.flows, load_grid(args.grid))
        records = read_externals_csv(args.externals) if args.externals else []
        scores = evaluate_checkpoint(ckpt, series, records)
        print(f"val_rmse={scores['val_rmse']:.6f} recorded={scores['recorded_val_rmse']:.6f}")

    if args.fusion_maps:
        if ckpt.config.fusion != "matrix":
            raise UsageError("checkpoint uses sum fusion; it has no weight maps")
        stats = fusion_weight_stats_from_params(ckpt.params)
        export_weight_maps(stats.maps, args.fusion_maps, args.scale)
        write_fusion_summary(stats, os.path.join(args.fusion_maps, "fusion_summary.json"))
        for label, frac in stats.fractions.items():
            print(f"{label}: {frac:.1%} of regions below |w| = {stats.threshold}")


def cmd_serve(args: argparse.Namespace) -> None:
    from api import serve
    from pipeline import PipelineConfig

    serve(PipelineConfig.model_validate(_read_json(args.config)), args.host, args.port)


def cmd_heatmap(args: argparse.Namespace) -> None:
    from data_manager import load_grid, load_series
    from heatmap import heatmap_export

    series = load_series(args.flows, load_grid(args.grid))
    t = series.latest_index if args.t is None else args.t
    x = series.get(t) if t is not None else None
    if x is None:
        raise LookupError(f"interval {t} is not in {args.flows}")
    heatmap_export(x, args.channel, args.out, args.scale)
    logging.getLogger(__name__).info("Heatmap of interval %d (%s) → %s", t, args.channel, args.out)


def cmd_pipeline(args: argparse.Namespace) -> None:
    import threading

    from pipeline import Pipeline, PipelineConfig

    pipeline = Pipeline.from_config(PipelineConfig.model_validate(_read_json(args.config)))
    stop = threading.Event()
    try:
        pipeline.run(stop, max_ticks=args.ticks)
    except KeyboardInterrupt:
        stop.set()


# ── Parser ─────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description="City crowd-flow forecasting engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic city (grid, trajectories, externals, flows)")
    p.add_argument("--config", required=True, help="SynthConfig JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--verify", action="store_true", help="recount flows from the emitted CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flows", help="aggregate a trajectory CSV into an FLW1 flow series")
    p.add_argument("--in", dest="input", required=True, help="trajectory CSV")
    p.add_argument("--grid", required=True, help="grid JSON")
    p.add_argument("--out", required=True, help="output FLW1 file")
    p.add_argument("--start", type=int, default=None, help="first covered interval")
    p.add_argument("--end", type=int, default=None, help="end of covered intervals (exclusive)")
    p.set_defaults(func=cmd_flows)

    p = sub.add_parser("train", help="train the residual flow model and write a STRN checkpoint")
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--grid")
    p.add_argument("--flows")
    p.add_argument("--externals")
    p.add_argument("--checkpoint")
    p.add_argument("--history", help="history CSV path")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast the next k intervals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--externals")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--policy", choices=["forecast-supplied", "hold-last"], default="hold-last")
    p.add_argument("--out", required=True, help="output FLW1 file (a .json sidecar is written next to it)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint or run an experiment spec")
    p.add_argument("--experiment", help="ExperimentSpec JSON")
    p.add_argument("--out-dir", default=None, help=f"report directory (default {REPORTS_DIR})")
    p.add_argument("--checkpoint")
    p.add_argument("--grid")
    p.add_argument("--flows")
    p.add_argument("--externals")
    p.add_argument("--fusion-maps", help="directory for fusion weight heatmaps")
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the pipeline and the HTTP API")
    p.add_argument("--config", required=True, help="PipelineConfig JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("heatmap", help="render one interval as a PPM heatmap")
    p.add_argument("--flows", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--t", type=int, default=None, help="interval index (default latest)")
    p.add_argument("--channel", choices=["in", "out"], default="in")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("pipeline", help="run the pull → convert → predict → push loop")
    p.add_argument("--config", required=True, help="PipelineConfig JSON")
    p.add_argument("--ticks", type=int, default=None, help="stop after this many ticks")
    p.set_defaults(func=cmd_pipeline)
    return parser


# ── Main ───────────────────────────────────────────────────────────────────────

def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)

    setup_logging(args.verbose)
    logger = logging.getLogger(__name__)
    try:
        args.func(args)
        return 0
    except (UsageError, ValidationError) as exc:
        logger.error("Usage error: %s", exc)
        return 1
    except Exception as exc:
        logger.error("%s failed: %s", args.command, exc, exc_info=True)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
