"""Mini-batch, epoch and memory parallelism: schedules, weight sync, planning.

Trainer layout: ``k`` memory groups of ``i*j`` trainers. Inside a group, the
trainer with local rank ``g*i + a`` sits in epoch slot ``g`` and takes local
slice ``a`` of each global batch its slot trains.

Each memory group absorbs one global batch per *memory step*. Step ``s`` goes
to slot ``s mod j``, whose trainers train it for ``j`` consecutive iterations
(``s .. s+j-1``) against ``j`` distinct negative groups. Only the first of those
iterations writes memory back; the other ``j-1`` reuse the same read.
Group ``m`` starts its sweep at the first batch of time segment ``m`` and
resets its memory each time the sweep wraps to batch 0.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .config import TrainConfig
from .memstore import DaemonStep
from .tgraph import ConfigError


class PlannerError(ConfigError):
    pass


# -- configuration planner -----------------------------------------------------

def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def plan_config(p: int, q: int, max_safe_batch: int, gpu_saturation_batch: int,
                mem_copies_per_machine: int) -> tuple[int, int, int]:
    """Pick ``(i, j, k)`` for ``p`` machines with ``q`` trainers each.

    ``i`` covers the largest safe global batch with saturating local batches,
    ``k`` takes as many memory copies as main memory allows, ``j`` fills the rest.
    """
    if p < 1 or q < 1:
        raise PlannerError("need p >= 1 and q >= 1")
    if min(max_safe_batch, gpu_saturation_batch, mem_copies_per_machine) <= 0:
        raise PlannerError("capacities must be positive")
    n = p * q
    want_i = max(1, math.ceil(max_safe_batch / gpu_saturation_batch))
    if want_i > q:
        raise PlannerError(f"mini-batch parallelism {want_i} exceeds trainers per machine q={q}")
    i = min(d for d in _divisors(q) if d >= want_i)
    k_cap = min(p * mem_copies_per_machine, n // i)
    if k_cap < p:
        raise PlannerError(f"only {k_cap} memory copies fit but k >= p={p} is required")
    # k must leave an integral j and keep each i*j group on one machine (p | k)
    for k in range(k_cap, p - 1, -1):
        if (n // i) % k == 0 and k % p == 0:
            return i, n // (i * k), k
    raise PlannerError(f"no integral (i, j, k) with i={i}, p={p}, q={q}, k <= {k_cap}")


# -- schedules -------------------------------------------------------------------

def split_even(rng: tuple[int, int], parts: int) -> list[tuple[int, int]]:
    """Chronological split of ``[lo, hi)`` into ``parts`` contiguous ranges."""
    lo, hi = rng
    sizes = [len(a) for a in np.array_split(np.arange(lo, hi), parts)]
    out, s = [], lo
    for n in sizes:
        out.append((s, s + n))
        s += n
    return out


def schedule_minibatch(global_batch: tuple[int, int], i: int) -> list[tuple[int, int]]:
    """Local batches of a global batch; all are read before any is written back."""
    if i < 1:
        raise ConfigError("i must be >= 1")
    return split_even(global_batch, i)


def segment_starts(n_batches: int, k: int) -> list[int]:
    return [s for s, _ in split_even((0, n_batches), k)]


def schedule_memory(n_batches: int, k: int) -> list[list[int]]:
    """One full sweep per memory copy, copy ``r`` starting at segment ``r``."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n_batches == 0:
        return [[] for _ in range(k)]
    starts = segment_starts(n_batches, k)
    return [[(s + x) % n_batches for x in range(n_batches)] for s in starts]


def negative_groups_for(seed: int, group: int, step: int, j: int, num_groups: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919, group, step])
    return rng.choice(num_groups, size=j, replace=False)


class Task(NamedTuple):
    iteration: int
    role: str          # writer | reader | idle
    epoch: int = -1    # memory epoch of the trainer's memory copy
    segment: int = -1
    batch: int = -1    # global batch index
    local: int = -1    # slice within the global batch
    neg_group: int = -1
    step: int = -1     # memory step of the group
    sub: int = -1      # position among the j iterations on this batch
    reset: bool = False


IDLE = "idle"


def schedule_epoch(n_steps: int, j: int, seed: int = 0, num_groups: int = 10,
                   group: int = 0) -> list[list[Task]]:
    """Per-slot task lists for one memory copy absorbing ``n_steps`` batches.

    Batch ``s`` is trained by slot ``s mod j`` in iterations ``s..s+j-1``,
    writer first. ``batch`` holds the step index here.
    """
    if j < 1:
        raise ConfigError("j must be >= 1")
    n_iter = n_steps + j - 1 if n_steps else 0
    out = [[Task(t, IDLE) for t in range(n_iter)] for _ in range(j)]
    for s in range(n_steps):
        negs = negative_groups_for(seed, group, s, j, num_groups)
        for jj in range(j):
            out[s % j][s + jj] = Task(s + jj, "writer" if jj == 0 else "reader", 0, 0, s, 0,
                                      int(negs[jj]), s, jj, s == 0)
    return out


def traversal_budget(epochs_single: float, num_trainers: int, n_batches: int = 1) -> int:
    """Per-trainer iterations keeping total traversed batches at ``epochs*n_batches``."""
    if num_trainers < 1 or epochs_single <= 0:
        raise ConfigError("counts must be >= 1")
    return math.ceil(epochs_single * n_batches / num_trainers)


@dataclass
class Assignment:
    i: int
    j: int
    k: int
    n_batches: int
    tasks: list[list[Task]]          # per global trainer rank, one per iteration
    steps: list[list[DaemonStep]]    # per memory group

    @property
    def n_iters(self) -> int:
        return len(self.tasks[0]) if self.tasks else 0

    @property
    def group_size(self) -> int:
        return self.i * self.j

    def rank(self, m: int, g: int, a: int) -> int:
        return m * self.group_size + g * self.i + a

    def locate(self, rank: int) -> tuple[int, int, int]:
        """(memory group, epoch slot, local slice) of a global rank."""
        m, r = divmod(rank, self.group_size)
        return m, r // self.i, r % self.i

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("trainer,iter,epoch,segment,batch,local,neg_group,role\n")
            for rank, tl in enumerate(self.tasks):
                for t in tl:
                    fh.write(f"{rank},{t.iteration},{t.epoch},{t.segment},{t.batch},"
                             f"{t.local},{t.neg_group},{t.role}\n")


def build_assignment(cfg: TrainConfig, n_batches: int) -> Assignment:
    """Combined ``i x j x k`` schedule over ``n_batches`` global batches per epoch.

    Total memory steps are ``ceil(epochs * n_batches / j)`` (each is trained
    ``j`` times), split as evenly as possible across the ``k`` groups.
    """
    i, j, k = cfg.i, cfg.j, cfg.k
    if n_batches < 1:
        raise ConfigError("no training batches")
    total = math.ceil(cfg.epochs * n_batches / j - 1e-9)
    per_group = [total // k + (1 if m < total % k else 0) for m in range(k)]
    n_iter = max(per_group) + j - 1
    starts = segment_starts(n_batches, k)
    seg_of = np.zeros(n_batches, dtype=np.int64)
    for m, (s, e) in enumerate(split_even((0, n_batches), k)):
        seg_of[s:e] = m
    tasks = [[Task(t, IDLE) for t in range(n_iter)] for _ in range(i * j * k)]
    steps = []
    for m in range(k):
        off = starts[m] % n_batches
        gsteps = []
        for s in range(per_group[m]):
            pos = off + s
            b, e = pos % n_batches, pos // n_batches
            reset = s == 0 or b == 0
            slot = s % j
            gsteps.append(DaemonStep(e, b, slot, reset))
            negs = negative_groups_for(cfg.seed, m, s, j, cfg.num_neg_groups)
            for a in range(i):
                rank = m * i * j + slot * i + a
                for jj in range(j):
                    tasks[rank][s + jj] = Task(s + jj, "writer" if jj == 0 else "reader", e,
                                               int(seg_of[b]), b, a, int(negs[jj]), s, jj, reset)
        steps.append(gsteps)
    return Assignment(i, j, k, n_batches, tasks, steps)


# -- weight synchronization ------------------------------------------------------

def sync_weights(grads: list[np.ndarray], active: Optional[list[bool]] = None) -> np.ndarray:
    """Average flat gradients over the trainers that did work this iteration."""
    if not grads:
        raise ValueError("no gradients")
    shape = grads[0].shape
    for g in grads:
        if g.shape != shape:
            raise ValueError(f"gradient shape mismatch {g.shape} vs {shape}")
    if active is None:
        active = [True] * len(grads)
    stack = np.stack([g if a else np.zeros(shape) for g, a in zip(grads, active)])
    n = sum(bool(a) for a in active)
    return stack.sum(0) / n if n else np.zeros(shape)


class AllReduce:
    """Synchronous gradient averaging over replicated trainers.

    Every trainer deposits its flat gradient into a double-buffered shared
    slot, waits on the barrier, and reduces the same rows in the same order,
    so all replicas compute bit-identical averages.
    """

    def __init__(self, n_trainers: int, size: int, barrier, pool=None):
        from .memstore import LocalPool
        pool = pool or LocalPool()
        self.n = n_trainers
        self.buf = pool.zeros((2, n_trainers, size))
        self.active = pool.zeros((2, n_trainers))
        self.barrier = barrier

    def average(self, rank: int, iteration: int, grad: Optional[np.ndarray]) -> np.ndarray:
        slot = iteration % 2
        if grad is None:
            self.buf[slot, rank] = 0.0
            self.active[slot, rank] = 0.0
        else:
            if grad.shape != self.buf.shape[2:]:
                raise ValueError(f"gradient of size {grad.shape} vs buffer {self.buf.shape[2:]}")
            self.buf[slot, rank] = grad
            self.active[slot, rank] = 1.0
        self.barrier.wait()
        n = self.active[slot].sum()
        if n == 0:
            return np.zeros(self.buf.shape[2])
        return self.buf[slot].sum(0) / n


def make_barrier(n: int, backend: str = "thread"):
    if backend == "thread":
        return threading.Barrier(n)
    import multiprocessing as mp
    return mp.get_context("fork").Barrier(n)
