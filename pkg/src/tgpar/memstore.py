"""Node memory, cached mails, and the memory daemon.

The daemon owns one copy of node memory for a group of ``i*j`` trainers and
serves their read/write requests through a fixed set of shared buffers and
status flags, executing them in the serialized bracket order

    (R0..R_{i-1})(W0..W_{i-1})(R_i..R_{2i-1})(W_i..W_{2i-1}) ...

i.e. one read bracket then one write bracket per window of ``i`` mini-batch
parallel trainers, the window advancing by ``i`` modulo ``i*j``. Requests
inside a bracket are served in arrival order.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np


class ProtocolError(RuntimeError):
    """Status-flag protocol violated by a client (a bug, not recoverable)."""


class DaemonError(RuntimeError):
    """Daemon gave up waiting on a trainer or was aborted."""


class CapacityError(ValueError):
    pass


# -- array allocation --------------------------------------------------------

class LocalPool:
    """Plain process-local arrays (thread backend)."""

    def zeros(self, shape, dtype=np.float64) -> np.ndarray:
        return np.zeros(shape, dtype=dtype)

    def close(self):
        pass


class SharedPool:
    """Arrays backed by anonymous shared memory, inherited across ``fork``."""

    def __init__(self):
        from multiprocessing import shared_memory
        self._shm = shared_memory
        self._blocks = []

    def zeros(self, shape, dtype=np.float64) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = max(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, 1)
        shm = self._shm.SharedMemory(create=True, size=nbytes)
        self._blocks.append(shm)
        arr = np.ndarray(shape, dtype=dtype, buffer=shm.buf)
        arr[...] = 0
        return arr

    def close(self):
        for shm in self._blocks:
            try:
                shm.close()
                shm.unlink()
            except (FileNotFoundError, BufferError):
                pass
        self._blocks.clear()


# -- node memory state -------------------------------------------------------

class MemoryRows(NamedTuple):
    mem: np.ndarray
    mem_ts: np.ndarray
    mail: np.ndarray
    mail_ts: np.ndarray


class WritePayload(NamedTuple):
    idx: np.ndarray
    mem: np.ndarray
    mem_ts: np.ndarray
    mail: np.ndarray
    mail_ts: np.ndarray


@dataclass
class NodeMemoryState:
    memory: np.ndarray
    last_update: np.ndarray
    mail: np.ndarray
    mail_ts: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.memory)

    def reset(self) -> None:
        for a in (self.memory, self.last_update, self.mail, self.mail_ts):
            a[...] = 0

    def gather(self, idx) -> MemoryRows:
        idx = np.asarray(idx, dtype=np.int64)
        return MemoryRows(self.memory[idx], self.last_update[idx], self.mail[idx], self.mail_ts[idx])

    def apply(self, w: WritePayload) -> None:
        self.memory[w.idx] = w.mem
        self.last_update[w.idx] = w.mem_ts
        self.mail[w.idx] = w.mail
        self.mail_ts[w.idx] = w.mail_ts

    def copy(self) -> "NodeMemoryState":
        return NodeMemoryState(self.memory.copy(), self.last_update.copy(),
                               self.mail.copy(), self.mail_ts.copy())

    def bitwise_equal(self, other: "NodeMemoryState") -> bool:
        return all(np.array_equal(a.view(np.uint64), b.view(np.uint64))
                   for a, b in zip(self.arrays(), other.arrays()))

    def arrays(self):
        return (self.memory, self.last_update, self.mail, self.mail_ts)


def init_state(num_nodes: int, d_mem: int, mail_dim: int, pool=None) -> NodeMemoryState:
    if num_nodes <= 0 or d_mem <= 0 or mail_dim <= 0:
        raise ValueError("state dimensions must be positive")
    pool = pool or LocalPool()
    return NodeMemoryState(pool.zeros((num_nodes, d_mem)), pool.zeros(num_nodes),
                           pool.zeros((num_nodes, mail_dim)), pool.zeros(num_nodes))


def zero_rows(n: int, d_mem: int, mail_dim: int) -> MemoryRows:
    return MemoryRows(np.zeros((n, d_mem)), np.zeros(n), np.zeros((n, mail_dim)), np.zeros(n))


# -- mails and COMB ----------------------------------------------------------

class Mail(NamedTuple):
    t: float
    event: int
    vec: np.ndarray


def comb(mails: Iterable[Mail]) -> Mail:
    """Most recent mail; equal timestamps resolve to the larger event index."""
    mails = list(mails)
    if not mails:
        raise ValueError("comb needs at least one mail")
    return max(mails, key=lambda m: (m.t, m.event))


def last_occurrence(nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique nodes (sorted) and the position of each one's last occurrence."""
    rev = nodes[::-1]
    uniq, first_rev = np.unique(rev, return_index=True)
    return uniq, len(nodes) - 1 - first_rev


def directed_mails(src, dst, t, efeat, s_src, s_dst):
    """Both raw mails ``{s_self||s_other||e}`` per event, interleaved (u-mail, v-mail).

    Returns ``(nodes, raw, ts)`` with ``2*len(src)`` rows in event order.
    """
    n = len(src)
    efeat = np.asarray(efeat, dtype=np.float64).reshape(n, -1)
    nodes = np.empty(2 * n, dtype=np.int64)
    nodes[0::2], nodes[1::2] = src, dst
    d = s_src.shape[1]
    raw = np.empty((2 * n, 2 * d + efeat.shape[1]))
    raw[0::2, :d], raw[0::2, d:2 * d] = s_src, s_dst
    raw[1::2, :d], raw[1::2, d:2 * d] = s_dst, s_src
    raw[0::2, 2 * d:] = efeat
    raw[1::2, 2 * d:] = efeat
    ts = np.repeat(np.asarray(t, dtype=np.float64), 2)
    return nodes, raw, ts


def generate_mails(src, dst, t, efeat, s_src, s_dst):
    """Mails of a chronological batch after COMB: one per touched node.

    ``s_src``/``s_dst`` are the pre-batch memories of each event's endpoints;
    every mail of a node within the batch therefore sees the same stale value.
    """
    nodes, raw, ts = directed_mails(src, dst, t, efeat, s_src, s_dst)
    uniq, pos = last_occurrence(nodes)
    return uniq, raw[pos], ts[pos]


def _staleness(t_root, t_prev, has_prev, mail_ts):
    if not np.any(has_prev):
        return 0.0
    return float(np.mean((t_prev - mail_ts)[has_prev]))


def staleness_report(state: NodeMemoryState, batch) -> dict:
    """Per-batch staleness and information loss.

    staleness: mean over positive root occurrences of the gap between a node's
    latest prior event and the latest event its usable memory reflects.
    info_loss: fraction of the batch's mails discarded by COMB.
    """
    roots = np.concatenate([batch.src, batch.dst])
    t = np.concatenate([batch.t, batch.t])
    nb = batch.pos_nbrs
    has_prev = nb.mask[:, 0]
    t_prev = t - nb.dt[:, 0]
    st = _staleness(t, t_prev, has_prev, state.mail_ts[roots])
    nodes = np.empty(2 * len(batch.src), dtype=np.int64)
    nodes[0::2], nodes[1::2] = batch.src, batch.dst
    n_mail = len(nodes)
    loss = 1.0 - len(np.unique(nodes)) / n_mail if n_mail else 0.0
    return {"staleness": st, "info_loss": loss, "mails": n_mail}


# -- status flags --------------------------------------------------------------

class StatusFlags:
    """0/1 request flags in a (possibly shared) int64 array.

    With a ``threading.Condition`` waiters sleep until notified; without one
    they poll with bounded exponential backoff (process backend).
    """

    def __init__(self, arr: np.ndarray, cond: Optional[threading.Condition] = None,
                 abort=None, timeout: float = 120.0):
        self.arr = arr
        self.cond = cond
        self.abort = abort
        self.timeout = timeout

    def __len__(self):
        return len(self.arr)

    def __getitem__(self, r):
        return int(self.arr[r])

    def set(self, r: int, value: int) -> None:
        if self.cond is None:
            self.arr[r] = value
            return
        with self.cond:
            self.arr[r] = value
            self.cond.notify_all()

    def wait_any(self, ranks: list[int], value: int, what: str = "") -> int:
        """Block until some ``arr[r] == value`` for ``r`` in ``ranks``; return it."""
        ranks = list(ranks)
        deadline = time.monotonic() + self.timeout

        def ready():
            for r in ranks:
                if self.arr[r] == value:
                    return r
            return None

        spins = 0
        while True:
            r = ready()
            if r is not None:
                return r
            if self.abort is not None and self.abort.is_set():
                raise DaemonError(f"aborted while waiting for {what} on ranks {ranks}")
            if time.monotonic() > deadline:
                raise DaemonError(f"timed out after {self.timeout}s waiting for {what} "
                                  f"on ranks {ranks} (trainer disconnected?)")
            if self.cond is not None:
                with self.cond:
                    if ready() is None:
                        self.cond.wait(0.05)
            else:
                time.sleep(0 if spins < 32 else min(1e-3, 1e-6 * 2 ** min(spins - 32, 10)))
                spins += 1

    def wait(self, r: int, value: int, what: str = "") -> None:
        self.wait_any([r], value, what)


# -- shared buffers ------------------------------------------------------------

class SharedBufferSet:
    """The eight daemon/trainer exchange buffers of one trainer group.

    Memory and mail rows carry one trailing column with their timestamp
    (``last_update`` resp. mail time). Index buffers hold the request length
    in slot 0 followed by node ids.
    """

    def __init__(self, i: int, j: int, read_cap: int, write_cap: int, d_mem: int,
                 mail_dim: int, pool=None, cond=None, abort=None, timeout: float = 120.0):
        pool = pool or LocalPool()
        n = i * j
        self.i, self.j = i, j
        self.read_cap, self.write_cap = read_cap, write_cap
        self.d_mem, self.mail_dim = d_mem, mail_dim
        self.mem_read_buf = pool.zeros((n, j, read_cap, d_mem + 1))
        self.mail_read_buf = pool.zeros((n, j, read_cap, mail_dim + 1))
        self.read_1idx_buf = pool.zeros((n, j, read_cap + 1), np.int64)
        self.mem_write_buf = pool.zeros((n, write_cap, d_mem + 1))
        self.mail_write_buf = pool.zeros((n, write_cap, mail_dim + 1))
        self.write_1idx_buf = pool.zeros((n, write_cap + 1), np.int64)
        self.read_status = StatusFlags(pool.zeros(n, np.int64), cond, abort, timeout)
        self.write_status = StatusFlags(pool.zeros(n, np.int64), cond, abort, timeout)

    @property
    def n_ranks(self) -> int:
        return self.i * self.j


class MemoryClient:
    """Trainer-side view of the shared buffers for one rank."""

    def __init__(self, buffers: SharedBufferSet, rank: int):
        if not 0 <= rank < buffers.n_ranks:
            raise ValueError(f"rank {rank} outside [0, {buffers.n_ranks})")
        self.b = buffers
        self.rank = rank

    def read(self, index_lists: list[np.ndarray]) -> list[MemoryRows]:
        """Issue one read request with up to ``j`` index lists and wait for it."""
        b, r, dm = self.b, self.rank, self.b.d_mem
        if len(index_lists) > b.j:
            raise CapacityError(f"{len(index_lists)} index lists but j={b.j}")
        if b.read_status[r] != 0:
            raise ProtocolError(f"rank {r}: read issued while previous read pending")
        for jj in range(b.j):
            idx = index_lists[jj] if jj < len(index_lists) else np.zeros(0, np.int64)
            if len(idx) > b.read_cap:
                raise CapacityError(f"read of {len(idx)} rows exceeds capacity {b.read_cap}")
            b.read_1idx_buf[r, jj, 0] = len(idx)
            b.read_1idx_buf[r, jj, 1:1 + len(idx)] = idx
        b.read_status.set(r, 1)
        b.read_status.wait(r, 0, f"read result for rank {r}")
        out = []
        for jj, idx in enumerate(index_lists):
            n = len(idx)
            mem = b.mem_read_buf[r, jj, :n]
            mail = b.mail_read_buf[r, jj, :n]
            out.append(MemoryRows(mem[:, :dm].copy(), mem[:, dm].copy(),
                                  mail[:, :-1].copy(), mail[:, -1].copy()))
        return out

    def write(self, w: WritePayload) -> None:
        b, r, dm = self.b, self.rank, self.b.d_mem
        n = len(w.idx)
        if n > b.write_cap:
            raise CapacityError(f"write of {n} rows exceeds capacity {b.write_cap}")
        if len(np.unique(w.idx)) != n:
            raise ProtocolError("write indices must be unique")
        b.write_status.wait(r, 0, f"write slot of rank {r}")
        b.write_1idx_buf[r, 0] = n
        b.write_1idx_buf[r, 1:1 + n] = w.idx
        b.mem_write_buf[r, :n, :dm] = w.mem
        b.mem_write_buf[r, :n, dm] = w.mem_ts
        b.mail_write_buf[r, :n, :-1] = w.mail
        b.mail_write_buf[r, :n, -1] = w.mail_ts
        b.write_status.set(r, 1)


def client_read(buffers: SharedBufferSet, rank: int, index_lists) -> list[MemoryRows]:
    return MemoryClient(buffers, rank).read(index_lists)


def client_write(buffers: SharedBufferSet, rank: int, payload: WritePayload) -> None:
    MemoryClient(buffers, rank).write(payload)


# -- daemon ------------------------------------------------------------------

class DaemonStep(NamedTuple):
    epoch: int
    batch: int
    slot: int
    reset: bool


class MemoryDaemon:
    """Serializes all memory traffic of one ``i x j`` trainer group.

    ``steps`` is the group's memory schedule: one entry per global batch the
    group's memory copy absorbs, each served as a read bracket followed by a
    write bracket of the slot's ``i`` trainers. ``reset`` marks the first step
    of a memory epoch (memory and mails are zeroed before it).

    Write collisions inside a bracket resolve to the highest rank regardless
    of arrival order.
    """

    def __init__(self, state: NodeMemoryState, buffers: SharedBufferSet, steps: list[DaemonStep],
                 oplog: Optional[list[str]] = None, skip_first_read: bool = False,
                 on_step: Optional[Callable[[DaemonStep, NodeMemoryState], None]] = None):
        self.state = state
        self.b = buffers
        self.i, self.j = buffers.i, buffers.j
        self.steps = steps
        self.oplog = oplog
        self.skip_first_read = skip_first_read
        self.on_step = on_step
        self._writer = np.full(state.num_nodes, -1, dtype=np.int64)
        self._step = None

    def run(self) -> None:
        for step in self.steps:
            self._step = step
            if step.reset:
                self.state.reset()
            ranks = list(range(step.slot * self.i, step.slot * self.i + self.i))
            if not (self.skip_first_read and step.reset):
                self.serve_bracket("R", ranks)
            self.serve_bracket("W", ranks)
            if self.on_step is not None:
                self.on_step(step, self.state)

    def serve_bracket(self, kind: str, ranks: list[int], order: Optional[list[int]] = None) -> None:
        """Serve one bracket; ``order`` forces an arrival order (testing hook)."""
        flags = self.b.read_status if kind == "R" else self.b.write_status
        pending = list(ranks)
        touched = []
        while pending:
            if order is not None:
                r = order[len(ranks) - len(pending)]
                if flags[r] != 1:
                    raise ProtocolError(f"forced order expects rank {r} to be pending")
            else:
                r = flags.wait_any(pending, 1, f"{kind} requests")
            if kind == "R":
                self._do_read(r)
            else:
                touched.append(self._do_write(r))
            pending.remove(r)
            flags.set(r, 0)
        for idx in touched:
            self._writer[idx] = -1

    def _log(self, kind, r, first, n):
        if self.oplog is not None:
            st = self._step
            epoch, it = (st.epoch, st.batch) if st is not None else (0, 0)
            self.oplog.append(f"{epoch},{it},{kind},{r},{first},{n}")

    def _do_read(self, r: int) -> None:
        b, s, dm = self.b, self.state, self.b.d_mem
        total, first = 0, -1
        for jj in range(self.j):
            n = int(b.read_1idx_buf[r, jj, 0])
            idx = b.read_1idx_buf[r, jj, 1:1 + n]
            b.mem_read_buf[r, jj, :n, :dm] = s.memory[idx]
            b.mem_read_buf[r, jj, :n, dm] = s.last_update[idx]
            b.mail_read_buf[r, jj, :n, :-1] = s.mail[idx]
            b.mail_read_buf[r, jj, :n, -1] = s.mail_ts[idx]
            if n and first < 0:
                first = int(idx[0])
            total += n
        self._log("R", r, first, total)

    def _do_write(self, r: int) -> np.ndarray:
        b, s, dm = self.b, self.state, self.b.d_mem
        n = int(b.write_1idx_buf[r, 0])
        idx = b.write_1idx_buf[r, 1:1 + n].copy()
        keep = self._writer[idx] < r
        sel = idx[keep]
        s.memory[sel] = b.mem_write_buf[r, :n, :dm][keep]
        s.last_update[sel] = b.mem_write_buf[r, :n, dm][keep]
        s.mail[sel] = b.mail_write_buf[r, :n, :-1][keep]
        s.mail_ts[sel] = b.mail_write_buf[r, :n, -1][keep]
        self._writer[sel] = r
        self._log("W", r, int(idx[0]) if n else -1, n)
        return sel


def daemon_run(state, buffers, steps, **kw) -> MemoryDaemon:
    d = MemoryDaemon(state, buffers, steps, **kw)
    d.run()
    return d


# -- op-log validation ---------------------------------------------------------

class OpLogParseError(ValueError):
    pass


class OpRecord(NamedTuple):
    line: int
    epoch: int
    it: int
    kind: str
    rank: int
    first: int
    length: int


def parse_oplog(lines: Iterable[str]) -> list[OpRecord]:
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6 or parts[2] not in ("R", "W"):
            raise OpLogParseError(f"line {lineno}: expected epoch,iter,R|W,rank,first_idx,len")
        try:
            e, it, r, f, n = (int(parts[k]) for k in (0, 1, 3, 4, 5))
        except ValueError:
            raise OpLogParseError(f"line {lineno}: non-integer field") from None
        out.append(OpRecord(lineno, e, it, parts[2], r, f, n))
    return out


def validate_oplog(lines: Iterable[str], i: int, j: int,
                   skip_first_read: bool = False) -> tuple[bool, Optional[int], str]:
    """Check the bracket grammar; returns ``(ok, first_bad_line, message)``.

    The window of ``i`` ranks starts at 0 and advances by ``i`` modulo ``i*j``
    after every write bracket, continuing across epochs. Each step (one
    ``(epoch, iter)`` pair) is a read bracket then a write bracket over the
    window's ranks in any order. With ``skip_first_read`` the read bracket of
    an epoch's first step may be absent.
    """
    recs = parse_oplog(lines)
    n = i * j
    pos, window = 0, 0
    prev_key = None
    while pos < len(recs):
        head = recs[pos]
        key = (head.epoch, head.it)
        if prev_key is not None:
            if head.epoch < prev_key[0] or (head.epoch == prev_key[0] and head.it != prev_key[1] + 1):
                return False, head.line, (f"step ({head.epoch},{head.it}) does not follow "
                                          f"({prev_key[0]},{prev_key[1]})")
        new_epoch = prev_key is None or head.epoch != prev_key[0]
        ranks = set(range(window * i, window * i + i))
        kinds = ["R", "W"]
        if skip_first_read and new_epoch and head.kind == "W":
            kinds = ["W"]
        for kind in kinds:
            seen = set()
            for _ in range(i):
                if pos >= len(recs):
                    return False, None, f"log ends inside a {kind} bracket"
                rec = recs[pos]
                if (rec.epoch, rec.it) != key:
                    return False, rec.line, f"bracket for step {key} interrupted by step ({rec.epoch},{rec.it})"
                if rec.kind != kind:
                    return False, rec.line, f"expected {kind} from ranks {sorted(ranks - seen)}, got {rec.kind}{rec.rank}"
                if rec.rank not in ranks or rec.rank in seen:
                    return False, rec.line, f"{kind}{rec.rank} outside bracket ranks {sorted(ranks)}"
                if not 0 <= rec.rank < n or rec.length < 0:
                    return False, rec.line, "bad rank or length"
                seen.add(rec.rank)
                pos += 1
        prev_key = key
        window = (window + 1) % j
    return True, None, "ok"
