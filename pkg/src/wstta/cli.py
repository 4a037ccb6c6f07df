"""Batch entry points: pretraining, adaptation runs, sweeps, evaluation,
dataset rendering and the HTTP service.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 metric gate failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .adaptation import AdaptationConfig
from .detector import (PretrainConfig, build_model, load_checkpoint, pretrain,
                       save_checkpoint)
from .evaluation import evaluate_model
from .scenes import (CATEGORIES, DEFAULT_TARGET_SHIFT, SPLITS, StreamConfig,
                     export_dataset, load_split, render_frame)
from .session import RunReport, SessionConfig, run_streaming

CLI_METHODS = ("source", "bn-stats", "dua", "wstta", "oracle-ft")


class GateFailure(Exception):
    """A --gate-map check did not reach its floor."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_report(report: RunReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_ndjson())
    root, _ = os.path.splitext(path)
    with open(root + ".csv", "w") as fh:
        fh.write(report.to_csv())


def _check_gate(map50: float, gate: float | None) -> None:
    if gate is not None and map50 < gate:
        raise GateFailure(f"mAP {map50:.4f} below gate {gate:.4f}")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    model = build_model(args.seed, list(CATEGORIES))
    frames = load_split(args.data_seed, "source-train", args.train_count)
    started = time.time()
    model, curve = pretrain(model, frames, PretrainConfig(
        steps=args.steps, batch_size=args.batch_size, seed=args.seed))
    save_checkpoint(model, args.out)
    if args.curve:
        with open(args.curve, "w") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(enumerate(curve))
    print(f"pretrained {args.steps} steps in {time.time() - started:.1f}s -> {args.out}")
    if args.eval_count != 0:
        result = evaluate_model(model, load_split(args.data_seed, "source-test",
                                                  args.eval_count))
        print(json.dumps({"split": "source-test", **result.as_payload()}, sort_keys=True))
        _check_gate(result.map50, args.gate_map)
    return 0


def _adapt_config(args, method: str, noise: float, seed: int,
                  order_seed: int | None, omega: float | None = None) -> SessionConfig:
    adaptation = AdaptationConfig(
        method=method.replace("-", "_"),
        omega=args.omega if omega is None else omega,
        delta=args.delta, lambda_=args.lambda_, alpha=args.alpha, tau=args.tau)
    return SessionConfig(
        adaptation=adaptation, data_seed=args.data_seed, seed=seed,
        budget=args.frames, order_seed=order_seed, eval_every=args.eval_every,
        eval_count=args.eval_count, noise_rho=noise, auto_oracle=True)


def _run_oracle_ft(args, seed: int) -> RunReport:
    model = load_checkpoint(args.model)
    frames = load_split(args.data_seed, "target-stream")
    started = time.time()
    model, curve = pretrain(model, frames, PretrainConfig(steps=args.oracle_steps, seed=seed))
    result = evaluate_model(model, load_split(args.data_seed, "target-test",
                                              args.eval_count))
    config = {"method": "oracle-ft", "oracle_steps": args.oracle_steps,
              "data_seed": args.data_seed, "seed": seed}
    return RunReport(config=config, seed=seed,
                     steps=[{"step": i, "loss_total": v} for i, v in enumerate(curve)],
                     evals=[{"step": args.oracle_steps, **result.as_payload()}],
                     wall_clock=time.time() - started)


def _run_adapt(args, method: str, noise: float, seed: int,
               order_seed: int | None, omega: float | None = None) -> RunReport:
    if method == "oracle-ft":
        return _run_oracle_ft(args, seed)
    model = load_checkpoint(args.model)
    config = _adapt_config(args, method, noise, seed, order_seed, omega)
    return run_streaming(model, config)


def cmd_adapt(args) -> int:
    report = _run_adapt(args, args.method, args.noise, args.seed, args.order_seed)
    if args.report:
        _write_report(report, args.report)
    summary = {"method": args.method, "seed": args.seed,
               "final_map50": report.final_map50, "steps": len(report.steps)}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    if args.vary in ("noise", "omega") and not args.values:
        raise SystemExit(1)
    values = args.values if args.vary != "order" else (args.values or [0.0])
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for value in values:
        finals = []
        for rep in range(args.repeats):
            seed = args.seed_base + rep
            noise = value if args.vary == "noise" else args.noise
            omega = value if args.vary == "omega" else None
            order_seed = seed if args.vary == "order" else args.order_seed
            report = _run_adapt(args, args.method, noise, seed, order_seed, omega)
            name = f"run-{args.vary}-{value}-{rep}.ndjson"
            _write_report(report, os.path.join(args.out_dir, name))
            finals.append(report.final_map50 if report.final_map50 is not None else 0.0)
        rows.append({"value": value, "mean_map50": float(np.mean(finals)),
                     "std_map50": float(np.std(finals)), "runs": len(finals)})
        print(json.dumps({"vary": args.vary, **rows[-1]}, sort_keys=True))
    with open(os.path.join(args.out_dir, "sweep.csv"), "w") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "mean_map50", "std_map50", "runs"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    frames = load_split(args.data_seed, args.split, args.count)
    result = evaluate_model(model, frames)
    print(json.dumps({"split": args.split, **result.as_payload()}, sort_keys=True))
    _check_gate(result.map50, args.gate_map)
    return 0


def cmd_render(args) -> int:
    domain = DEFAULT_TARGET_SHIFT if args.domain == "target" else None
    config = StreamConfig(seed=args.seed, domain=domain)
    frames = [render_frame(config, i) for i in range(args.count)]
    export_dataset(frames, args.out_dir)
    print(f"wrote {len(frames)} frames to {args.out_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    uvicorn.run(create_app(out_dir=args.out_dir), host=args.host, port=args.port,
                log_level="warning")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_adapt_flags(p: _Parser) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--omega", type=float, default=0.94)
    p.add_argument("--delta", type=float, default=0.005)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--order-seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--eval-count", type=int, default=None)
    p.add_argument("--oracle-steps", type=int, default=1000)


def build_parser() -> _Parser:
    parser = _Parser(prog="wstta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train the detector on the source split")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--eval-count", type=int, default=None,
                   help="source-test frames to evaluate; 0 skips evaluation")
    p.add_argument("--curve", default=None, help="write the loss curve CSV here")
    p.add_argument("--gate-map", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="one streaming adaptation run")
    p.add_argument("--method", choices=CLI_METHODS, default="wstta")
    _add_adapt_flags(p)
    p.add_argument("--report", default=None, help="write NDJSON report (+ .csv summary)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="repeat adaptation runs over a swept value")
    p.add_argument("--vary", choices=("noise", "omega", "order"), required=True)
    p.add_argument("--values", type=lambda s: [float(v) for v in s.split(",") if v],
                   default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--method", choices=CLI_METHODS, default="wstta")
    p.add_argument("--out-dir", required=True)
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a named split")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=sorted(SPLITS), default="source-test")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--gate-map", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="export a synthetic dataset as PNG + annotations")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("serve", help="run the streaming session service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
