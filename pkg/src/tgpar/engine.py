"""Run orchestration: k memory daemons, i*j*k trainers, all-reduce, evaluation.

Trainers and daemons are threads (``backend="thread"``) or forked processes
(``backend="process"``). Both share node memory and exchange buffers through
the same arrays; only the allocation and the wake-up mechanism differ.
"""
from __future__ import annotations

import hashlib
import math
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .config import TrainConfig
from .memstore import (LocalPool, MemoryClient, MemoryDaemon, NodeMemoryState, SharedBufferSet,
                       SharedPool, init_state, zero_rows)
from .parallel import AllReduce, Assignment, build_assignment, make_barrier
from .tgraph import ConfigError, TemporalGraph, chronological_split
from .trainer import (Adam, BatchStore, apply_update, build_step_input, evaluate_mrr,
                      step_compute)

METRICS_HEADER = "iter,traversed,loss,val_mrr,elapsed_s"


@dataclass
class TrainingRecord:
    config: TrainConfig
    rows: list               # (iter, traversed, loss, val_mrr, elapsed_s)
    losses: np.ndarray       # (trainers, iters), nan where idle
    digests: np.ndarray      # (trainers, iters) parameter hash after each update
    params: nn.ModelParams
    states: list             # final memory copy of each group
    oplogs: list             # per group, lines "epoch,iter,kind,rank,first,len"
    snapshots: list          # per group, [(DaemonStep, NodeMemoryState)] if recorded
    assignment: Assignment
    train_time: float
    eval_time: float
    test_mrr: Optional[float] = None
    splits: tuple = ()

    @property
    def iters_per_sec(self) -> float:
        return self.assignment.n_iters / self.train_time if self.train_time > 0 else float("nan")

    @property
    def final_val_mrr(self) -> float:
        vals = [r[3] for r in self.rows if not math.isnan(r[3])]
        return vals[-1] if vals else float("nan")

    def metrics_csv(self, with_time: bool = True) -> str:
        lines = [METRICS_HEADER if with_time else METRICS_HEADER.rsplit(",", 1)[0]]
        for it, trav, loss, mrr, el in self.rows:
            row = f"{it},{trav},{loss:.10g},{mrr:.10g}"
            lines.append(row + (f",{el:.3f}" if with_time else ""))
        return "\n".join(lines) + "\n"


def param_hash(flat: np.ndarray) -> int:
    return int.from_bytes(hashlib.blake2b(flat.tobytes(), digest_size=8).digest(), "little", signed=True)


def model_dims(cfg: TrainConfig, g: TemporalGraph) -> nn.ModelDims:
    return nn.ModelDims(g.num_nodes, cfg.d_mem, cfg.d_time, g.d_edge, cfg.d_static)


def eval_points(assignment: Assignment, store: BatchStore, n_train: int, every: float) -> list[int]:
    """Iterations after which the traversed-edge count crosses a multiple of
    ``every * n_train``; the last iteration is always included."""
    trav = traversed_per_iter(assignment, store)
    cum = np.cumsum(trav)
    unit = max(every * n_train, 1)
    marks = np.floor(cum / unit + 1e-9)
    pts = [t for t in range(len(cum)) if marks[t] > (marks[t - 1] if t else 0)]
    if len(cum) and (not pts or pts[-1] != len(cum) - 1):
        pts.append(len(cum) - 1)
    return pts


def traversed_per_iter(assignment: Assignment, store: BatchStore) -> np.ndarray:
    out = np.zeros(assignment.n_iters, dtype=np.int64)
    for tl in assignment.tasks:
        for t in tl:
            if t.role != "idle":
                out[t.iteration] += store.local_size(t.batch, t.local)
    return out


class _Abort:
    """Shared failure flag plus the barrier to break on failure."""

    def __init__(self, event, barrier):
        self.event = event
        self.barrier = barrier

    def trip(self):
        self.event.set()
        try:
            self.barrier.abort()
        except Exception:
            pass


def run_training(cfg: TrainConfig, g: TemporalGraph, params: Optional[nn.ModelParams] = None, *,
                 evaluate: bool = True, test_eval: bool = False, record_trajectory: bool = False,
                 out_dir: Optional[str] = None, log=None) -> TrainingRecord:
    """Train ``cfg.epochs`` epoch-equivalents of the training range under ``cfg``'s
    ``(i, j, k)`` layout and return the convergence record."""
    cfg.validate()
    train_r, val_r, test_r = chronological_split(g, cfg.train_frac, cfg.val_frac)
    n_train = train_r[1] - train_r[0]
    if n_train < 1:
        raise ConfigError("empty training range")
    dims = model_dims(cfg, g)
    if params is None:
        params = nn.ModelParams.init(dims, cfg.seed, g.max_t)
    store = BatchStore(g, train_r, cfg.i * cfg.local_batch, cfg.i, cfg.n_neighbors,
                       cfg.num_neg_groups, cfg.seed)
    assignment = build_assignment(cfg, store.n_batches)
    points = set(eval_points(assignment, store, n_train, cfg.eval_every)) if evaluate else set()
    trav = np.cumsum(traversed_per_iter(assignment, store))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        assignment.dump(os.path.join(out_dir, "assignment.csv"))

    proc = cfg.backend == "process"
    if proc:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        pool, abort_ev = SharedPool(), ctx.Event()
    else:
        pool, abort_ev = LocalPool(), threading.Event()
    n, T = cfg.n_trainers, assignment.n_iters
    barrier = make_barrier(n, cfg.backend)
    abort = _Abort(abort_ev, barrier)
    try:
        read_cap = min(g.num_nodes, 3 * (cfg.local_batch + 1) * (cfg.n_neighbors + 1))
        write_cap = min(g.num_nodes, 2 * (cfg.local_batch + 1))
        states, buffers = [], []
        for _ in range(cfg.k):
            states.append(init_state(g.num_nodes, dims.d_mem, dims.d_mail_raw, pool))
            buffers.append(SharedBufferSet(cfg.i, cfg.j, read_cap, write_cap, dims.d_mem,
                                           dims.d_mail_raw, pool,
                                           None if proc else threading.Condition(),
                                           abort_ev, cfg.daemon_timeout))
        allreduce = AllReduce(n, params.size, barrier, pool)
        losses = pool.zeros((n, T))
        losses[...] = np.nan
        digests = pool.zeros((n, T), np.int64)
        timing = pool.zeros(2)  # eval seconds, train wall seconds
        ctx_args = dict(cfg=cfg, g=g, params=params, store=store, assignment=assignment,
                        buffers=buffers, allreduce=allreduce, losses=losses, digests=digests,
                        points=points, trav=trav, ranges=(train_r, val_r), abort=abort,
                        timing=timing, log=log)
        if proc:
            result = _run_processes(ctx, ctx_args, states, record_trajectory)
        else:
            result = _run_threads(ctx_args, states, record_trajectory)
        rows, final_flat, oplogs, snaps = result
        final = params.copy()
        final.load_flat(final_flat)
        out_states = [s.copy() for s in states]
        losses, digests = losses.copy(), digests.copy()
        eval_time, wall = float(timing[0]), float(timing[1])
    finally:
        pool.close()

    rec = TrainingRecord(cfg, rows, losses, digests, final, out_states, oplogs, snaps,
                         assignment, wall - eval_time, eval_time, splits=(train_r, val_r, test_r))
    if test_eval and test_r[1] > test_r[0]:
        rec.test_mrr = evaluate_mrr(final, g, test_r, (0, test_r[0]), cfg.eval_neg, cfg.seed + 1,
                                    cfg.eval_batch, cfg.n_neighbors).mrr
    if out_dir:
        write_outputs(rec, out_dir)
    return rec


def write_outputs(rec: TrainingRecord, out_dir: str) -> None:
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(rec.metrics_csv())
    nn.save_checkpoint(os.path.join(out_dir, "model.ckpt"), rec.params)
    for m, lines in enumerate(rec.oplogs):
        with open(os.path.join(out_dir, f"oplog_{m}.csv"), "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))


# -- workers ---------------------------------------------------------------------

def _trainer(rank: int, c: dict, emit) -> None:
    cfg, g, asg, store = c["cfg"], c["g"], c["assignment"], c["store"]
    m, slot, a = asg.locate(rank)
    local_rank = slot * cfg.i + a
    client = MemoryClient(c["buffers"][m], local_rank)
    params = c["params"].copy()
    opt = Adam(params.size, cfg.effective_lr)
    dims = params.dims
    tasks = asg.tasks[rank]
    held = None
    rows = []
    t_start = time.perf_counter()
    last_eval = -1
    eval_time = 0.0
    for task in tasks:
        it = task.iteration
        grad = None
        if task.role != "idle":
            spec = store.get(task.batch, task.local)
            if task.role == "writer":
                groups = [tasks[it + jj].neg_group for jj in range(cfg.j)]
                inputs = [build_step_input(spec, gr) if spec.size else None for gr in groups]
                lists = [x.nodes if x is not None else np.zeros(0, np.int64) for x in inputs]
                if cfg.skip_first_read and task.reset:
                    got = [zero_rows(len(ix), dims.d_mem, dims.d_mail_raw) for ix in lists]
                else:
                    got = client.read(lists)
                held = (inputs, got)
            inp, mem_rows = held[0][task.sub], held[1][task.sub]
            if inp is not None:
                res, grads, payload = step_compute(params, g, inp, mem_rows)
                c["losses"][rank, it] = res.loss
                grad = nn.flatten_grads(grads, params)
                if task.role == "writer":
                    client.write(payload)
            elif task.role == "writer":
                client.write(_empty_payload(dims))
        avg = c["allreduce"].average(rank, it, grad)
        if not cfg.frozen:
            apply_update(params, opt, avg)
        c["digests"][rank, it] = param_hash(params.flat())
        if rank == 0 and it in c["points"]:
            t0 = time.perf_counter()
            loss = float(np.nanmean(c["losses"][:, last_eval + 1:it + 1])) if it > last_eval else float("nan")
            mrr = float("nan")
            train_r, val_r = c["ranges"]
            if val_r[1] > val_r[0]:
                mrr = evaluate_mrr(params, g, val_r, (0, val_r[0]), cfg.eval_neg, cfg.seed,
                                   cfg.eval_batch, cfg.n_neighbors).mrr
            eval_time += time.perf_counter() - t0
            row = (it, int(c["trav"][it]), loss, mrr, time.perf_counter() - t_start)
            rows.append(row)
            last_eval = it
            if c["log"] is not None:
                c["log"](row)
    if rank == 0:
        c["timing"][0] = eval_time
        c["timing"][1] = time.perf_counter() - t_start
        emit(("rows", rows))
        emit(("params", params.flat()))


def _empty_payload(dims):
    from .memstore import WritePayload
    z = np.zeros(0)
    return WritePayload(np.zeros(0, np.int64), np.zeros((0, dims.d_mem)), z,
                        np.zeros((0, dims.d_mail_raw)), z)


def _daemon(m: int, c: dict, state: NodeMemoryState, record: bool, emit) -> None:
    log: list[str] = []
    snaps = []
    on_step = (lambda st, s: snaps.append((st, s.copy()))) if record else None
    MemoryDaemon(state, c["buffers"][m], c["assignment"].steps[m], log,
                 c["cfg"].skip_first_read, on_step).run()
    emit(("oplog", m, log, snaps))


def _collect(msgs, k):
    rows, flat = [], None
    oplogs, snaps = [[] for _ in range(k)], [[] for _ in range(k)]
    for msg in msgs:
        if msg[0] == "rows":
            rows = msg[1]
        elif msg[0] == "params":
            flat = msg[1]
        elif msg[0] == "oplog":
            oplogs[msg[1]], snaps[msg[1]] = msg[2], msg[3]
    return rows, flat, oplogs, snaps


class TrainingAborted(RuntimeError):
    pass


def _run_threads(c: dict, states, record: bool):
    msgs, errors = [], []
    lock = threading.Lock()

    def emit(msg):
        with lock:
            msgs.append(msg)

    def guard(fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors.append((exc, traceback.format_exc()))
            c["abort"].trip()

    k = c["cfg"].k
    workers = [threading.Thread(target=guard, args=(_daemon, m, c, states[m], record, emit), daemon=True)
               for m in range(k)]
    workers += [threading.Thread(target=guard, args=(_trainer, r, c, emit), daemon=True)
                for r in range(c["cfg"].n_trainers)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        exc, tb = _root_cause(errors)
        raise TrainingAborted(f"{type(exc).__name__}: {exc}\n{tb}") from exc
    return _collect(msgs, k)


def _root_cause(errors):
    """Prefer the first error that is not a consequence of the abort."""
    for exc, tb in errors:
        if not isinstance(exc, threading.BrokenBarrierError) and "aborted" not in str(exc):
            return exc, tb
    return errors[0]


def _run_processes(ctx, c: dict, states, record: bool):
    q = ctx.Queue()
    k, n = c["cfg"].k, c["cfg"].n_trainers

    def child(fn, *args):
        code = 0
        try:
            fn(*args, q.put)
        except BaseException as exc:  # noqa: BLE001
            q.put(("error", f"{type(exc).__name__}: {exc}", traceback.format_exc()))
            c["abort"].trip()
            code = 1
        q.close()
        q.join_thread()
        os._exit(code)

    procs = [ctx.Process(target=child, args=(_daemon, m, c, states[m], record)) for m in range(k)]
    procs += [ctx.Process(target=child, args=(_trainer, r, c)) for r in range(n)]
    for p in procs:
        p.start()
    expected = k + 2  # one oplog per daemon, rows + params from rank 0
    msgs, errors = [], []
    while len(msgs) < expected:
        try:
            msg = q.get(timeout=0.5)
        except Exception:
            if all(not p.is_alive() for p in procs) and q.empty():
                break
            continue
        (errors if msg[0] == "error" else msgs).append(msg)
        if errors:
            c["abort"].trip()
            break
    for p in procs:
        p.join(timeout=c["cfg"].daemon_timeout)
        if p.is_alive():
            p.terminate()
    while not q.empty():
        msg = q.get()
        if msg[0] == "error":
            errors.append(msg)
    if errors or len(msgs) < expected:
        real = [e for e in errors if "BrokenBarrier" not in e[1] and "aborted" not in e[1]]
        e = (real or errors or [("error", "worker exited without reporting", "")])[0]
        raise TrainingAborted(f"{e[1]}\n{e[2]}")
    return _collect(msgs, k)
