"""Command line entry point: ``train``, ``analyze``, ``validate-oplog``, ``gen``, ``plan``.

Exit codes: 0 ok, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .config import TrainConfig, dump_config, load_config, parse_config
from .memstore import OpLogParseError, init_state, staleness_report, validate_oplog
from .parallel import plan_config
from .synth import SynthConfig, generate
from .tgraph import (ConfigError, GraphFormatError, batch_ranges, captured_events_analysis,
                     event_degree, load_events, make_batch, save_events)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _overrides(args) -> dict:
    names = {f.name for f in fields(TrainConfig)}
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key.strip() not in names:
            raise ConfigError(f"unknown config key {key!r}")
        out[key.strip()] = val
    for name in ("i", "j", "k", "p", "q", "epochs", "seed", "backend", "local_batch"):
        val = getattr(args, name, None)
        if val is not None:
            out[name] = val
    return out


def _resolve_config(args) -> TrainConfig:
    ov = _overrides(args)
    cfg = load_config(args.config, ov) if args.config else parse_config("", ov)
    if (cfg.max_safe_batch and cfg.saturation_batch and cfg.mem_copies
            and not any(k in ov for k in ("i", "j", "k"))):
        i, j, k = plan_config(cfg.p, cfg.q, cfg.max_safe_batch, cfg.saturation_batch, cfg.mem_copies)
        cfg = cfg.replace(i=i, j=j, k=k)
    return cfg.validate()


def cmd_train(args) -> int:
    from .engine import run_training
    cfg = _resolve_config(args)
    if args.plan_only:
        print(f"i={cfg.i} j={cfg.j} k={cfg.k}")
        return EXIT_OK
    g = load_events(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))

    def log(row):
        if not args.quiet:
            print(f"iter {row[0]} traversed {row[1]} loss {row[2]:.4f} val_mrr {row[3]:.4f}", flush=True)

    rec = run_training(cfg, g, out_dir=args.out, test_eval=args.test, log=log)
    msg = f"final val_mrr {rec.final_val_mrr:.4f}  iters/s {rec.iters_per_sec:.2f}"
    if rec.test_mrr is not None:
        msg += f"  test_mrr {rec.test_mrr:.4f}"
    print(msg)
    return EXIT_OK


def cmd_analyze(args) -> int:
    g = load_events(args.data)
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    deg = event_degree(g)
    order = np.argsort(-deg, kind="stable")
    order = order[deg[order] > 0]
    caps = {b: captured_events_analysis(g, b) for b in sizes}
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.per_node:
            out.write("rank,node,degree," + ",".join(f"captured_{b}" for b in sizes) + "\n")
            for r, v in enumerate(order):
                out.write(f"{r},{v},{deg[v]}," + ",".join(str(caps[b][v]) for b in sizes) + "\n")
        else:
            out.write("batch_size,captured,events,info_loss" + (",staleness" if args.staleness else "") + "\n")
            total = int(deg.sum())
            for b in sizes:
                c = int(caps[b].sum())
                row = f"{b},{c},{total},{1 - c / total if total else 0.0:.6f}"
                if args.staleness:
                    row += f",{mean_staleness(g, b):.6g}"
                out.write(row + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def mean_staleness(g, batch_size: int) -> float:
    """Average gap between a root's latest prior event and the latest event its
    memory reflects, replaying timestamps only."""
    state = init_state(max(g.num_nodes, 1), 1, 1)
    tot, n = 0.0, 0
    for s, e in batch_ranges((0, g.num_events), batch_size):
        rep = staleness_report(state, make_batch(g, s, e, 1))
        tot += rep["staleness"] * (e - s)
        n += e - s
        nodes = np.concatenate([g.src[s:e], g.dst[s:e]])
        state.mail_ts[nodes] = np.concatenate([g.t[s:e], g.t[s:e]])
    return tot / n if n else 0.0


def cmd_validate_oplog(args) -> int:
    with open(args.oplog, encoding="utf-8") as fh:
        lines = fh.readlines()
    ok, line, msg = validate_oplog(lines, args.i, args.j, args.skip_first_read)
    if ok:
        print("PASS")
        return EXIT_OK
    print(f"FAIL at line {line}: {msg}")
    return EXIT_RUNTIME


def cmd_gen(args) -> int:
    sc = SynthConfig(users=args.users, items=args.items if args.items else max(args.nodes - args.users, 1),
                     events=args.events, communities=args.communities, burst_prob=args.burst_prob,
                     d_edge=args.d_edge, seed=args.seed)
    if sc.users < 1 or sc.items < 2:
        raise ConfigError("need at least one user and two items")
    save_events(args.out, generate(sc))
    print(f"wrote {args.events} events over {sc.users + sc.items} nodes to {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    i, j, k = plan_config(args.p, args.q, args.max_safe_batch, args.saturation_batch, args.mem_copies)
    print(f"i={i} j={j} k={k}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tgpar", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train under an (i, j, k) layout")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--plan-only", action="store_true")
    t.add_argument("--test", action="store_true", help="also report test MRR")
    t.add_argument("--quiet", action="store_true")
    for name in ("i", "j", "k", "p", "q", "seed", "local_batch"):
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    t.add_argument("--epochs", type=float)
    t.add_argument("--backend", choices=("thread", "process"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("analyze", help="captured events per batch size")
    a.add_argument("--data", required=True)
    a.add_argument("--batch-sizes", default="1,10,60,600,6000")
    a.add_argument("--per-node", action="store_true", help="one row per node, by degree descending")
    a.add_argument("--staleness", action="store_true", help="add mean memory staleness per batch size")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)

    v = sub.add_parser("validate-oplog", help="check a daemon op-log's bracket grammar")
    v.add_argument("oplog")
    v.add_argument("--i", type=int, required=True)
    v.add_argument("--j", type=int, required=True)
    v.add_argument("--skip-first-read", action="store_true")
    v.set_defaults(fn=cmd_validate_oplog)

    gp = sub.add_parser("gen", help="write a synthetic bipartite event stream")
    gp.add_argument("--out", required=True)
    gp.add_argument("--nodes", type=int, default=300)
    gp.add_argument("--users", type=int, default=200)
    gp.add_argument("--items", type=int)
    gp.add_argument("--events", type=int, default=5000)
    gp.add_argument("--communities", type=int, default=5)
    gp.add_argument("--burst-prob", type=float, default=0.3)
    gp.add_argument("--d-edge", type=int, default=0)
    gp.add_argument("--seed", type=int, default=0)
    gp.set_defaults(fn=cmd_gen)

    p = sub.add_parser("plan", help="choose (i, j, k) for p machines x q trainers")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--max-safe-batch", type=int, required=True)
    p.add_argument("--saturation-batch", type=int, required=True)
    p.add_argument("--mem-copies", type=int, required=True)
    p.set_defaults(fn=cmd_plan)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "train" and not args.plan_only and not args.data:
            raise ConfigError("train needs --data")
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphFormatError, OpLogParseError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
