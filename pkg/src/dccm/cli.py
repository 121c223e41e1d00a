"""Command line front end.

Subcommands cover the full study pipeline: gen-data, train, verify,
simulate, geodesic-dump.  Every subcommand reads a scenario TOML via
--config; a handful of flags override individual paths and budgets.
Failures print to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import dccm_net, riemann, simloop, trainer


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dccm",
        description="contraction-metric learning and adaptive tracking for an uncertain CSTR",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample the training grid and store it")
    _common(p)
    p.add_argument("--out", help="dataset path override")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit the metric and gain networks")
    _common(p)
    p.add_argument("--dataset", help="reuse a stored dataset instead of regenerating")
    p.add_argument("--out", help="weights path override")
    p.add_argument("--max-iters", type=int, help="iteration budget override")
    p.add_argument("--seed", type=int, help="initialization seed override")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("verify", help="check the contraction condition on a fine mesh")
    _common(p)
    p.add_argument("--weights", help="weights path override")
    p.add_argument("--report", help="per-cell report CSV path override")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("simulate", help="run the adaptive closed loop and log a CSV")
    _common(p)
    p.add_argument("--weights", help="weights path override")
    p.add_argument("--out", help="trajectory CSV path override")
    p.add_argument("--summary", help="run summary path override")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("geodesic-dump", help="print the discretized geodesic between two states")
    _common(p)
    p.add_argument("--weights", help="weights path override")
    p.add_argument("--x", type=float, nargs=2, required=True, metavar=("X1", "X2"))
    p.add_argument("--x-star", type=float, nargs=2, required=True, metavar=("X1", "X2"))
    p.add_argument("--r-hat", type=float, nargs=2, metavar=("R1", "R2"),
                   help="parameter estimate (default: scenario initial estimate)")
    p.add_argument("--segments", type=int, help="segment count override")
    p.add_argument("--out", help="write node CSV here instead of stdout")
    p.set_defaults(func=_cmd_geodesic_dump)
    return parser


def _common(p):
    p.add_argument("--config", required=True, help="scenario TOML path")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = simloop.load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(cfg, args)
    except simloop.SimulationError as exc:
        # flush whatever was logged so the failure can be inspected
        out = getattr(args, "out", None) or cfg.trajectory_path
        simloop.write_rows(exc.rows, out)
        print(f"error: {exc} ({len(exc.rows)} rows flushed to {out})", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_gen_data(cfg, args) -> int:
    dataset = trainer.generate_dataset(cfg.model(), cfg.trainer)
    path = args.out or cfg.dataset_path
    trainer.save_dataset(dataset, path)
    print(f"{len(dataset)} samples -> {path}")
    return 0


def _cmd_train(cfg, args) -> int:
    tcfg = cfg.trainer
    if args.max_iters is not None:
        tcfg = dataclasses.replace(tcfg, max_iters=args.max_iters)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    model = cfg.model()
    dataset = trainer.load_dataset(args.dataset) if args.dataset else None
    weights, history = trainer.train(model, tcfg, dataset)
    path = args.out or cfg.weights_path
    dccm_net.save_weights(weights, path)
    print(f"{len(history)} recorded losses, best {history[-1]!r} -> {path}")
    return 0


def _cmd_verify(cfg, args) -> int:
    weights = dccm_net.load_weights(args.weights or cfg.weights_path)
    report = trainer.verify(weights, cfg.model(), cfg.trainer)
    path = args.report or cfg.report_path
    report.to_csv(path)
    print(report.summary())
    print(f"per-cell report -> {path}")
    return 0


def _cmd_simulate(cfg, args) -> int:
    weights = dccm_net.load_weights(args.weights or cfg.weights_path)
    log = simloop.run(cfg, weights)
    out = args.out or cfg.trajectory_path
    log.to_csv(out)
    summary = simloop.summarize(log, cfg.r_true)
    summary_path = args.summary or cfg.summary_path
    with open(summary_path, "w", encoding="ascii") as fh:
        fh.write(summary.to_text() + "\n")
    print(summary.to_text())
    print(f"trajectory -> {out}")
    return 0


def _cmd_geodesic_dump(cfg, args) -> int:
    weights = dccm_net.load_weights(args.weights or cfg.weights_path)
    r_hat = np.asarray(args.r_hat, dtype=np.float64) if args.r_hat else cfg.r_hat0
    segments = args.segments or cfg.segments
    path = riemann.geodesic(
        weights,
        np.asarray(args.x, dtype=np.float64),
        np.asarray(args.x_star, dtype=np.float64),
        r_hat,
        segments,
        cfg.geodesic,
    )
    lines = ["s,x1,x2"]
    for s, node in enumerate(path.nodes):
        lines.append(f"{s},{float(node[0])!r},{float(node[1])!r}")
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text + "\n")
        print(f"length {path.length!r}, converged {path.converged} -> {args.out}")
    else:
        print(text)
        print(f"length {path.length!r}, converged {path.converged}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
