"""Command-line interface: simulate, fit, predict, conformal, eval, gridify, run."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import conformal as conformal_mod
from . import estimation, pipeline, simulation, thresholding
from .events import load_events_csv, save_events_csv
from .marks import LinearMarkModel, NonLinearMarkModel, kde_scorer, load_precomputed_scores
from .model import ModelParams


def _load_params(path) -> ModelParams:
    return ModelParams.from_json(Path(path).read_text())


def _mark_model(args, seq):
    if args.mark_model == "linear":
        return LinearMarkModel()
    if args.mark_model == "kde":
        return NonLinearMarkModel(kde_scorer(seq.marks))
    if args.mark_model == "precomputed":
        if not args.scores:
            raise ValueError("--scores is required with --mark-model precomputed")
        return NonLinearMarkModel(load_precomputed_scores(args.scores))
    raise ValueError(f"unknown mark model {args.mark_model!r}")


def cmd_simulate(args) -> int:
    params = _load_params(args.params)
    seq = simulation.simulate(
        simulation.SimConfig(params=params, horizon=args.horizon, seed=args.seed)
    )
    save_events_csv(seq, args.out)
    print(f"wrote {len(seq)} events to {args.out}")
    return 0


def cmd_fit(args) -> int:
    seq = load_events_csv(args.events, horizon=args.horizon, num_locations=args.locations)
    mark_model = _mark_model(args, seq)
    config = estimation.FitConfig(
        beta_low=args.beta_low,
        beta_high=args.beta_high,
        grid_points=args.grid_points,
        pgd_steps=args.pgd_steps,
        kappa=args.kappa,
        l1_weight=args.l1_weight,
    )
    if args.method == "alternating":
        fit = estimation.alternating_fit(seq, mark_model, config)
    else:
        fit = estimation.grid_fit(seq, mark_model, config)
    fit.params.to_json(args.out)
    if args.trace:
        pipeline.write_fit_trace_csv(args.trace, fit.trace)
    print(f"objective {fit.objective:.6f} at beta {fit.params.beta:.6g}; params -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    params = _load_params(args.params)
    seq = load_events_csv(args.events, horizon=args.horizon, num_locations=args.locations)
    mark_model = _mark_model(args, seq)
    num_days = int(np.floor(seq.horizon))
    risk = pipeline.risk_series(params, seq, mark_model)
    truth = pipeline.daily_truths(seq, num_days)
    config = thresholding.ThresholdConfig.from_first_day_risk(
        risk[0], num_days, delta=args.delta, a1=args.a1, a2=args.a2
    )
    screening = (
        None if args.no_screening else thresholding.ScreeningState.from_validation(truth)
    )
    trace = thresholding.detect(risk, truth, config, screening)
    pipeline.write_detections_csv(args.out, trace)
    print(f"wrote detection trace to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.counterfactual:
        params = _load_params(args.params)
        seq = load_events_csv(args.events, horizon=args.horizon, num_locations=args.locations)
        mark_model = LinearMarkModel()
        marks_a = np.array([float(v) for v in args.marks_a.split(",")])
        marks_b = np.array([float(v) for v in args.marks_b.split(",")])
        out = pipeline.counterfactual_delta(
            params, seq, mark_model, args.time, args.location, marks_a, marks_b
        )
        print(json.dumps(out, sort_keys=True))
        return 0
    trace = pipeline.read_detections_csv(args.detections)
    report = pipeline.metrics_from_trace(trace)
    pipeline.write_metrics_csv(args.out, report)
    print(f"mean F1 {report.f1.mean():.4f} over {len(report.f1)} locations -> {args.out}")
    return 0


def cmd_conformal(args) -> int:
    seq = load_events_csv(args.data, horizon=args.horizon, num_locations=args.locations)
    if seq.magnitudes is None:
        raise ValueError("conformal needs a 'magnitude' column")
    X, y = seq.marks, seq.magnitudes
    n_train = args.train_size
    if not 10 <= n_train < len(seq):
        raise ValueError("train size must be >= 10 and leave a test stream")
    sp = conformal_mod.ScoreParams(lambda_reg=args.lambda_reg, k_reg=args.k_reg)
    alphas = tuple(float(a) for a in args.alphas.split(","))
    if args.method == "eraps":
        run = conformal_mod.eraps(
            X[:n_train], y[:n_train], X[n_train:], y[n_train:],
            num_bootstrap=args.num_bootstrap,
            batch_size=min(args.batch_size, len(seq) - n_train),
            alphas=alphas,
            score_params=sp,
            seed=args.seed,
        )
    else:
        run = conformal_mod.sraps(
            X[:n_train], y[:n_train], X[n_train:], y[n_train:],
            split_fraction=args.split_fraction,
            alphas=alphas,
            score_params=sp,
            seed=args.seed,
        )
    pipeline.write_conformal_sets_jsonl(args.sets, run)
    pipeline.write_conformal_summary_csv(args.summary, run)
    for a in alphas:
        print(f"alpha={a}: coverage {run.coverage[a]:.4f}, mean size {run.mean_size[a]:.3f}")
    return 0


def cmd_gridify(args) -> int:
    grid = pipeline.GridSpec.from_dict(json.loads(Path(args.grid).read_text()))
    prep = pipeline.PreprocessConfig(
        categorical_columns=tuple(args.categorical.split(",")) if args.categorical else ()
    )
    result = pipeline.ingest(args.raw, grid, prep, horizon=args.horizon)
    save_events_csv(result.sequence, args.out)
    for msg in result.messages:
        print(msg)
    print(f"wrote {len(result.sequence)} events over {grid.num_cells} cells to {args.out}")
    return 0


def cmd_run(args) -> int:
    bundle = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        bundle["seed"] = args.seed
    manifest = pipeline.run_end_to_end(bundle, args.out_dir)
    print(json.dumps(manifest, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firecast",
        description="Event-risk prediction with mutually exciting point processes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic event sequence")
    p.add_argument("--params", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit model parameters by constrained MLE")
    p.add_argument("--events", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--locations", type=int, required=True)
    p.add_argument("--mark-model", choices=("linear", "kde", "precomputed"), default="linear")
    p.add_argument("--scores", help="per-event score CSV for --mark-model precomputed")
    p.add_argument("--method", choices=("grid", "alternating"), default="grid")
    p.add_argument("--beta-low", type=float, default=0.01)
    p.add_argument("--beta-high", type=float, default=2.0)
    p.add_argument("--grid-points", type=int, default=8)
    p.add_argument("--pgd-steps", type=int, default=500)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--l1-weight", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="binary predictions via dynamic thresholds")
    p.add_argument("--params", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--locations", type=int, required=True)
    p.add_argument("--mark-model", choices=("linear", "kde"), default="linear")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--a1", type=float, default=1.1)
    p.add_argument("--a2", type=float, default=1.1)
    p.add_argument("--no-screening", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="precision/recall/F1 from a detection trace")
    p.add_argument("--detections")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--counterfactual", action="store_true")
    p.add_argument("--params")
    p.add_argument("--events")
    p.add_argument("--horizon", type=float)
    p.add_argument("--locations", type=int)
    p.add_argument("--time", type=float)
    p.add_argument("--location", type=int)
    p.add_argument("--marks-a")
    p.add_argument("--marks-b")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("conformal", help="magnitude prediction sets")
    p.add_argument("--data", required=True, help="event CSV with a magnitude column")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--locations", type=int, required=True)
    p.add_argument("--train-size", type=int, required=True)
    p.add_argument("--method", choices=("eraps", "sraps"), default="eraps")
    p.add_argument("--num-bootstrap", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--alphas", default="0.05,0.1,0.2")
    p.add_argument("--lambda-reg", type=float, default=1.0)
    p.add_argument("--k-reg", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sets", default="conformal_sets.jsonl")
    p.add_argument("--summary", default="conformal_summary.csv")
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("gridify", help="map raw coordinates onto the grid")
    p.add_argument("--raw", required=True)
    p.add_argument("--grid", required=True, help="GridSpec JSON")
    p.add_argument("--horizon", type=float)
    p.add_argument("--categorical", help="comma-separated categorical mark columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gridify)

    p = sub.add_parser("run", help="end-to-end pipeline from a config bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pipeline.PipelineError as exc:
        print(f"firecast {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surface a stage-tagged one-liner, not a traceback
        print(f"firecast {args.command}: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
