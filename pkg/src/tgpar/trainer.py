"""Per-trainer step, loss, optimizer and MRR evaluation.

Every step runs in the leak-free order: read stale memory and cached mails,
run the GRU on them to get usable memory, embed roots with temporal attention,
score positive and negative pairs, backpropagate, and only then hand back the
roots' new memory and mails for writing.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .memstore import (MemoryClient, MemoryRows, NodeMemoryState, WritePayload,
                       directed_mails, init_state, last_occurrence)
from .parallel import schedule_minibatch
from .tgraph import (MiniBatchSpec, NeighborBlock, TemporalGraph, attach_negatives,
                     batch_ranges, make_batch, sample_negatives)


class TrainingError(RuntimeError):
    pass


# -- batches ---------------------------------------------------------------------

class BatchStore:
    """Local mini-batches with all negative groups attached, built once and cached.

    Global batch ``b`` covers ``global_batch`` consecutive training events and is
    split chronologically into ``i`` local batches.
    """

    def __init__(self, g: TemporalGraph, rng: tuple[int, int], global_batch: int, i: int = 1,
                 n_neighbors: int = 10, num_groups: int = 10, seed: int = 0):
        self.g = g
        self.n_neighbors = n_neighbors
        self.num_groups = num_groups
        self.seed = seed
        self.global_ranges = batch_ranges(rng, global_batch)
        self.local_ranges = [schedule_minibatch(r, i) for r in self.global_ranges]
        self._cache: dict = {}
        self._lock = threading.Lock()

    @property
    def n_batches(self) -> int:
        return len(self.global_ranges)

    def local_size(self, b: int, a: int) -> int:
        s, e = self.local_ranges[b][a]
        return e - s

    def get(self, b: int, a: int = 0) -> MiniBatchSpec:
        key = (b, a)
        spec = self._cache.get(key)
        if spec is None:
            s, e = self.local_ranges[b][a]
            spec = make_batch(self.g, s, e, self.n_neighbors)
            if spec.size:
                neg = sample_negatives(spec, self.g, self.num_groups, [self.seed, 104729, s, e])
                attach_negatives(spec, self.g, neg, self.n_neighbors)
            with self._lock:
                spec = self._cache.setdefault(key, spec)
        return spec

    def prefetch(self, keys) -> threading.Thread:
        """Build the given ``(b, a)`` batches on a background thread."""
        th = threading.Thread(target=lambda: [self.get(*k) for k in keys], daemon=True)
        th.start()
        return th


@dataclass
class StepInput:
    nodes: np.ndarray       # unique node ids whose memory is needed (sorted)
    root_pos: np.ndarray    # (R,) into nodes
    nbr_pos: np.ndarray     # (R, n) into nodes, 0 where masked
    nbr_eid: np.ndarray     # (R, n), 0 where masked
    nbr_dt: np.ndarray      # (R, n)
    nbr_mask: np.ndarray    # (R, n)
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    eid: np.ndarray
    neg_src: np.ndarray     # root position of the source paired with each negative root

    @property
    def n_pos(self) -> int:
        return len(self.src)

    @property
    def n_roots(self) -> int:
        return len(self.root_pos)


def build_input(roots: np.ndarray, nb: NeighborBlock, src, dst, t, eid, neg_src) -> StepInput:
    mask = nb.mask
    nodes = np.unique(np.concatenate([roots, nb.nbr[mask]]))
    root_pos = np.searchsorted(nodes, roots)
    nbr_pos = np.where(mask, np.searchsorted(nodes, np.where(mask, nb.nbr, nodes[0] if len(nodes) else 0)), 0)
    return StepInput(nodes, root_pos, nbr_pos, np.where(mask, nb.eid, 0), nb.dt, mask,
                     src, dst, t, eid, neg_src)


def _stack(blocks: list[NeighborBlock]) -> NeighborBlock:
    return NeighborBlock(*(np.concatenate([getattr(b, f) for b in blocks])
                           for f in ("nbr", "eid", "dt", "mask")))


def build_step_input(spec: MiniBatchSpec, group: Optional[int]) -> StepInput:
    """Roots ``[src; dst; neg]`` of one local batch against one negative group."""
    B = spec.size
    if group is None or spec.neg is None:
        roots = np.concatenate([spec.src, spec.dst])
        nb = spec.pos_nbrs
        neg_src = np.zeros(0, dtype=np.int64)
    else:
        roots = np.concatenate([spec.src, spec.dst, spec.neg[group]])
        nb = _stack([spec.pos_nbrs, spec.neg_nbrs[group]])
        neg_src = np.arange(B)
    return build_input(roots, nb, spec.src, spec.dst, spec.t, spec.eid, neg_src)


# -- loss --------------------------------------------------------------------------

def bce_loss(pos: np.ndarray, neg: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """mean softplus(-pos) + mean softplus(neg), with gradients w.r.t. both."""
    if len(pos) == 0:
        raise ValueError("need at least one positive logit")
    loss = float(np.mean(np.logaddexp(0.0, -pos)))
    d_pos = -nn.sigmoid(-pos) / len(pos)
    d_neg = np.zeros_like(neg)
    if len(neg):
        loss += float(np.mean(np.logaddexp(0.0, neg)))
        d_neg = nn.sigmoid(neg) / len(neg)
    return loss, d_pos, d_neg


# -- model step ------------------------------------------------------------------

@dataclass
class Forward:
    loss: float
    pos_logits: np.ndarray
    neg_logits: np.ndarray
    s_new: np.ndarray
    h: np.ndarray
    tapes: dict = field(default_factory=dict)


def _edge_block(g: TemporalGraph, inp: StepInput) -> np.ndarray:
    ef = g.edge_feat[inp.nbr_eid]
    return ef * inp.nbr_mask[..., None]


def usable_memory(params: nn.ModelParams, rows: MemoryRows):
    """GRU over stored memory and cached mail; returns ``(s_new, tape, dt_mail)``."""
    dt_mail = rows.mail_ts - rows.mem_ts
    if np.any(dt_mail < 0):
        raise TrainingError("cached mail older than the memory it updates")
    m = nn.expand_mail(rows.mail, dt_mail, params["time.omega"], params.dims.d_mem)
    s_new, tape = nn.gru_forward(rows.mem, m, params)
    return s_new, tape, dt_mail


def embed(params: nn.ModelParams, g: TemporalGraph, inp: StepInput, s_new: np.ndarray):
    omega = params["time.omega"]
    node_in = nn.combine_static(s_new, params["static.table"][inp.nodes])
    root_in = np.concatenate([node_in[inp.root_pos], nn.time_encode(np.zeros(inp.n_roots), omega)], axis=1)
    nbr_in = np.concatenate([node_in[inp.nbr_pos], _edge_block(g, inp),
                             nn.time_encode(inp.nbr_dt, omega)], axis=2)
    return nn.attention_forward(root_in, nbr_in, inp.nbr_mask, params)


def _pairs(inp: StepInput):
    B = inp.n_pos
    u = np.concatenate([np.arange(B), inp.neg_src])
    v = np.concatenate([B + np.arange(B), 2 * B + np.arange(len(inp.neg_src))])
    return u, v


def model_forward(params: nn.ModelParams, g: TemporalGraph, inp: StepInput, rows: MemoryRows) -> Forward:
    s_new, gtape, dt_mail = usable_memory(params, rows)
    h, atape = embed(params, g, inp, s_new)
    u, v = _pairs(inp)
    logits, dtape = nn.decoder_forward(h[u], h[v], params)
    B = inp.n_pos
    pos, neg = logits[:B], logits[B:]
    loss, _, _ = bce_loss(pos, neg)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    return Forward(loss, pos, neg, s_new, h, {"gru": gtape, "attn": atape, "dec": dtape,
                                              "dt_mail": dt_mail, "pairs": (u, v)})


def scatter_add_rows(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Deterministic row scatter-add: ``out[idx[r]] += vals[r]``."""
    out = np.zeros((n, vals.shape[1]))
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    si = idx[order]
    starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
    out[si[starts]] = np.add.reduceat(vals[order], starts, axis=0)
    return out


def model_backward(params: nn.ModelParams, g: TemporalGraph, inp: StepInput, fwd: Forward) -> dict:
    dims = params.dims
    dm, dn, de = dims.d_mem, dims.d_node, dims.d_edge
    omega = params["time.omega"]
    _, d_pos, d_neg = bce_loss(fwd.pos_logits, fwd.neg_logits)
    grads, d_hu, d_hv = nn.decoder_backward(fwd.tapes["dec"], np.concatenate([d_pos, d_neg]), params)
    u, v = fwd.tapes["pairs"]
    dh = scatter_add_rows(np.concatenate([u, v]), np.concatenate([d_hu, d_hv]), len(fwd.h))
    g_att, d_root, d_nbr = nn.attention_backward(fwd.tapes["attn"], dh, params)
    grads.update(g_att)
    mask = inp.nbr_mask
    U = len(inp.nodes)
    d_node = scatter_add_rows(np.concatenate([inp.root_pos, inp.nbr_pos[mask]]),
                              np.concatenate([d_root[:, :dn], d_nbr[mask][:, :dn]]), U)
    d_omega, _ = nn.time_encode_backward(inp.nbr_dt, omega, d_nbr[..., dn + de:])
    g_static = np.zeros_like(params["static.table"])
    g_static[inp.nodes] = d_node[:, dm:]
    grads["static.table"] = g_static
    g_gru, d_mail = nn.gru_backward(fwd.tapes["gru"], d_node[:, :dm], params)
    grads.update(g_gru)
    d_om2, _ = nn.time_encode_backward(fwd.tapes["dt_mail"], omega, d_mail[:, 2 * dm:2 * dm + dims.d_time])
    grads["time.omega"] = d_omega + d_om2
    return grads


def memory_writeback(g: TemporalGraph, inp: StepInput, rows: MemoryRows, s_new: np.ndarray) -> WritePayload:
    """New memory and most-recent mail for every positive endpoint of the batch."""
    B = inp.n_pos
    s_src = s_new[inp.root_pos[:B]]
    s_dst = s_new[inp.root_pos[B:2 * B]]
    nodes, raw, ts = directed_mails(inp.src, inp.dst, inp.t, g.edge_feat[inp.eid], s_src, s_dst)
    uniq, last = last_occurrence(nodes)
    at = np.searchsorted(inp.nodes, uniq)
    return WritePayload(uniq, s_new[at], rows.mail_ts[at], raw[last], ts[last])


@dataclass
class IterationResult:
    loss: float
    pos_mean: float
    neg_mean: float
    grad_norm: float
    wall: float


def step_compute(params: nn.ModelParams, g: TemporalGraph, inp: StepInput, rows: MemoryRows):
    """Forward + backward for one step. Returns ``(result, grads, payload)``."""
    t0 = time.perf_counter()
    fwd = model_forward(params, g, inp, rows)
    grads = model_backward(params, g, inp, fwd)
    payload = memory_writeback(g, inp, rows, fwd.s_new)
    gn = float(np.sqrt(sum(float(np.sum(x * x)) for x in grads.values())))
    res = IterationResult(fwd.loss, float(fwd.pos_logits.mean()),
                          float(fwd.neg_logits.mean()) if len(fwd.neg_logits) else 0.0,
                          gn, time.perf_counter() - t0)
    return res, grads, payload


def train_step(batch: MiniBatchSpec, client: MemoryClient, params: nn.ModelParams,
               g: TemporalGraph, group: int = 0):
    """Read memory through ``client``, compute, and write the roots back."""
    inp = build_step_input(batch, group)
    rows = client.read([inp.nodes])[0]
    res, grads, payload = step_compute(params, g, inp, rows)
    client.write(payload)
    return res, grads


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        flat -= self.lr * mh / (np.sqrt(vh) + self.eps)


def apply_update(params: nn.ModelParams, opt: Adam, grad_flat: np.ndarray) -> None:
    flat = params.flat()
    opt.step(flat, grad_flat)
    params.load_flat(flat)


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    mrr: float
    num_queries: int


def absorb_batch(params: nn.ModelParams, g: TemporalGraph, state: NodeMemoryState,
                 start: int, end: int) -> None:
    """Advance memory over events ``[start, end)`` without scoring anything."""
    if end <= start:
        return
    src, dst = g.src[start:end], g.dst[start:end]
    nodes = np.unique(np.concatenate([src, dst]))
    rows = state.gather(nodes)
    s_new, _, _ = usable_memory(params, rows)
    inp = StepInput(nodes, np.searchsorted(nodes, np.concatenate([src, dst])), *([None] * 4),
                    src, dst, g.t[start:end], np.arange(start, end), np.zeros(0, np.int64))
    state.apply(memory_writeback(g, inp, rows, s_new))


def eval_negatives(rng: np.random.Generator, dst: np.ndarray, lo: int, hi: int, num_neg: int) -> np.ndarray:
    """Uniform draws from ``[lo, hi)`` excluding each row's true destination."""
    if hi - lo < 2:
        raise ValueError("destination range too small to exclude the true node")
    x = rng.integers(lo, hi - 1, size=(len(dst), num_neg))
    return x + (x >= dst[:, None])


def mrr_from_logits(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Reciprocal ranks; ties count against the true candidate."""
    rank = 1 + (neg >= pos[:, None]).sum(1)
    return 1.0 / rank


def evaluate_mrr(params: nn.ModelParams, g: TemporalGraph, eval_range: tuple[int, int],
                 warm_range: Optional[tuple[int, int]] = None, num_neg: int = 49, seed: int = 0,
                 batch_size: int = 200, n_neighbors: int = 10) -> EvalResult:
    """Replay ``warm_range`` into fresh memory, then rank each true destination in
    ``eval_range`` against ``num_neg`` sampled ones, updating memory after each batch."""
    dims = params.dims
    state = init_state(g.num_nodes, dims.d_mem, dims.d_mail_raw)
    if warm_range is None:
        warm_range = (0, eval_range[0])
    for s, e in batch_ranges(warm_range, batch_size):
        absorb_batch(params, g, state, s, e)
    lo, hi = g.destination_range()
    rng = np.random.default_rng([seed, 4099])
    rr = []
    for s, e in batch_ranges(eval_range, batch_size):
        spec = make_batch(g, s, e, n_neighbors)
        B = spec.size
        negs = eval_negatives(rng, spec.dst, lo, hi, num_neg).ravel()
        neg_nb = NeighborBlock(*g.recent_neighbors(negs, np.repeat(spec.t, num_neg), n_neighbors))
        roots = np.concatenate([spec.src, spec.dst, negs])
        inp = build_input(roots, _stack([spec.pos_nbrs, neg_nb]), spec.src, spec.dst, spec.t,
                          spec.eid, np.repeat(np.arange(B), num_neg))
        rows = state.gather(inp.nodes)
        fwd = model_forward(params, g, inp, rows)
        rr.append(mrr_from_logits(fwd.pos_logits, fwd.neg_logits.reshape(B, num_neg)))
        state.apply(memory_writeback(g, inp, rows, fwd.s_new))
    rr = np.concatenate(rr) if rr else np.zeros(0)
    return EvalResult(float(rr.mean()) if len(rr) else float("nan"), len(rr))


# -- daemon-free sequential reference ------------------------------------------------

@dataclass
class ReferenceResult:
    losses: list
    params: nn.ModelParams
    state: NodeMemoryState
    snapshots: list


def sequential_reference(params: nn.ModelParams, g: TemporalGraph, store: BatchStore, tasks,
                         lr: float, frozen: bool = False, snapshot: bool = False) -> ReferenceResult:
    """Single trainer, direct memory access, one task per iteration.

    ``tasks`` yields objects with ``batch``, ``neg_group`` and ``reset``
    (e.g. the writer tasks of a ``(1,1,1)`` assignment).
    """
    params = params.copy()
    dims = params.dims
    state = init_state(g.num_nodes, dims.d_mem, dims.d_mail_raw)
    opt = Adam(params.size, lr)
    losses, snaps = [], []
    for task in tasks:
        if task.reset:
            state.reset()
        spec = store.get(task.batch, 0)
        inp = build_step_input(spec, task.neg_group)
        rows = state.gather(inp.nodes)
        res, grads, payload = step_compute(params, g, inp, rows)
        state.apply(payload)
        losses.append(res.loss)
        if not frozen:
            apply_update(params, opt, nn.flatten_grads(grads, params))
        if snapshot:
            snaps.append((task.batch, state.copy()))
    return ReferenceResult(losses, params, state, snaps)
