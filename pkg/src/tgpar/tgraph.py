"""Continuous-time dynamic graphs of edge events.

Loading, chronological splitting, batching, recent-neighbor sampling and
negative sampling. A :class:`TemporalGraph` is immutable once built, so any
number of trainer threads may read it concurrently.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class GraphFormatError(ValueError):
    """Malformed dataset row or sidecar entry."""

    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class NodeRangeError(GraphFormatError):
    pass


class ConfigError(ValueError):
    """Invalid configuration value (fractions, partitions, parallel degrees)."""


@dataclass(frozen=True)
class Event:
    src: int
    dst: int
    t: float
    edge_feat: np.ndarray = field(default_factory=lambda: np.zeros(0))


class TemporalGraph:
    """Time-ordered edge events with a per-node chronological neighbor index.

    Events are sorted by timestamp with a stable sort, so equal timestamps keep
    their input order. The neighbor index is stored CSR style: the entries of
    node ``v`` live in ``[nbr_ptr[v], nbr_ptr[v+1])`` ordered by event index.
    """

    def __init__(self, src, dst, t, edge_feat=None, num_nodes: Optional[int] = None,
                 bipartite_boundary: Optional[int] = None):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        if not (src.shape == dst.shape == t.shape) or src.ndim != 1:
            raise GraphFormatError("src, dst and t must be 1-d arrays of equal length")
        n_ev = len(t)
        if edge_feat is None:
            edge_feat = np.zeros((n_ev, 0))
        edge_feat = np.asarray(edge_feat, dtype=np.float64)
        edge_feat = edge_feat.reshape(n_ev, edge_feat.shape[-1] if edge_feat.ndim == 2 else -1)
        if n_ev and np.any(t < 0):
            raise GraphFormatError("timestamps must be non-negative")
        if num_nodes is None:
            num_nodes = int(max(src.max(initial=-1), dst.max(initial=-1)) + 1)
        if n_ev and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
            raise NodeRangeError(f"node id outside [0, {num_nodes})")

        order = np.argsort(t, kind="stable")
        self.src = src[order]
        self.dst = dst[order]
        self.t = t[order]
        self.edge_feat = edge_feat[order]
        self.num_nodes = int(num_nodes)
        self.bipartite_boundary = bipartite_boundary
        if bipartite_boundary is not None and n_ev:
            crosses = (self.src < bipartite_boundary) != (self.dst < bipartite_boundary)
            if not crosses.all():
                bad = int(np.flatnonzero(~crosses)[0])
                raise GraphFormatError(f"event {bad} does not cross the bipartite boundary")
        for a in (self.src, self.dst, self.t, self.edge_feat):
            a.setflags(write=False)
        self._build_index()

    def _build_index(self):
        n_ev = self.num_events
        eid = np.arange(n_ev, dtype=np.int64)
        loop = self.src == self.dst
        # a self-loop is incident to its node once
        owner = np.concatenate([self.src, self.dst[~loop]])
        other = np.concatenate([self.dst, self.src[~loop]])
        eids = np.concatenate([eid, eid[~loop]])
        order = np.lexsort((eids, owner))
        self.nbr_node = other[order]
        self.nbr_eid = eids[order]
        self.nbr_t = self.t[self.nbr_eid]
        counts = np.bincount(owner, minlength=self.num_nodes)
        self.nbr_ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=self.nbr_ptr[1:])
        for a in (self.nbr_node, self.nbr_eid, self.nbr_t, self.nbr_ptr):
            a.setflags(write=False)

    @property
    def num_events(self) -> int:
        return len(self.t)

    @property
    def max_t(self) -> float:
        return float(self.t[-1]) if self.num_events else 0.0

    @property
    def d_edge(self) -> int:
        return self.edge_feat.shape[1]

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.nbr_ptr)

    @property
    def bipartite(self) -> bool:
        return self.bipartite_boundary is not None

    def event(self, k: int) -> Event:
        return Event(int(self.src[k]), int(self.dst[k]), float(self.t[k]), self.edge_feat[k])

    @property
    def events(self) -> list[Event]:
        return [self.event(k) for k in range(self.num_events)]

    def destination_range(self) -> tuple[int, int]:
        """Node id range negatives are drawn from."""
        if self.bipartite_boundary is None:
            return 0, self.num_nodes
        return int(self.bipartite_boundary), self.num_nodes

    def recent_neighbors(self, nodes, times, n: int):
        """Vectorized recent-neighbor lookup.

        Returns ``(nbr, eid, dt, mask)`` each of shape ``(len(nodes), n)``; slot 0
        is the most recent event strictly before the query time. Padded slots
        hold ``nbr=-1``, ``eid=-1``, ``dt=0`` and ``mask=False``.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        lo = self.nbr_ptr[nodes]
        hi = self.nbr_ptr[nodes + 1]
        # vectorized bisection: first entry with nbr_t >= time
        a, b = lo.copy(), hi.copy()
        while True:
            live = a < b
            if not live.any():
                break
            mid = (a + b) // 2
            ok = np.zeros_like(live)
            ok[live] = self.nbr_t[mid[live]] < times[live]
            a = np.where(live & ok, mid + 1, a)
            b = np.where(live & ~ok, mid, b)
        pos = a
        idx = pos[:, None] - 1 - np.arange(n)[None, :]
        mask = idx >= lo[:, None]
        safe = np.where(mask, idx, 0)
        if self.nbr_node.size == 0:
            nbr = np.full(idx.shape, -1, dtype=np.int64)
            eid = nbr.copy()
            dt = np.zeros(idx.shape)
            return nbr, eid, dt, np.zeros(idx.shape, dtype=bool)
        nbr = np.where(mask, self.nbr_node[safe], -1)
        eid = np.where(mask, self.nbr_eid[safe], -1)
        dt = np.where(mask, times[:, None] - self.nbr_t[safe], 0.0)
        return nbr, eid, dt, mask


def _read_sidecar(path: str) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise GraphFormatError(f"expected key=value in {path}", lineno)
            key, val = line.split("=", 1)
            meta[key.strip()] = val.strip()
    return meta


def sidecar_path(path: str) -> str:
    return path + ".meta"


def load_events(path: str, num_nodes: Optional[int] = None,
                bipartite_boundary: Optional[int] = None) -> TemporalGraph:
    """Read a ``src,dst,t[,f0,...]`` CSV plus optional ``<path>.meta`` sidecar.

    Explicit arguments override sidecar values. Node ids must be 0-based.
    """
    meta = {}
    if os.path.exists(sidecar_path(path)):
        meta = _read_sidecar(sidecar_path(path))
    if num_nodes is None and "num_nodes" in meta:
        num_nodes = int(meta["num_nodes"])
    if bipartite_boundary is None and meta.get("bipartite_boundary", "none") != "none":
        bipartite_boundary = int(meta["bipartite_boundary"])
    d_e = int(meta["d_e"]) if "d_e" in meta else None

    src, dst, ts, feats = [], [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TemporalGraph([], [], [], np.zeros((0, d_e or 0)), num_nodes or 0,
                                 bipartite_boundary)
        header = [h.strip() for h in header]
        if header[:3] != ["src", "dst", "t"]:
            raise GraphFormatError("header must start with src,dst,t", 1)
        width = len(header)
        if d_e is not None and d_e != width - 3:
            raise GraphFormatError(f"sidecar d_e={d_e} but header has {width - 3} feature columns", 1)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                raise GraphFormatError(f"expected {width} fields, got {len(row)}", lineno)
            try:
                u, v, t = int(row[0]), int(row[1]), float(row[2])
                f = [float(x) for x in row[3:]]
            except ValueError as exc:
                raise GraphFormatError(str(exc), lineno) from None
            if t < 0 or not np.isfinite(t):
                raise GraphFormatError(f"bad timestamp {row[2]!r}", lineno)
            if u < 0 or v < 0 or (num_nodes is not None and max(u, v) >= num_nodes):
                raise NodeRangeError(f"node id out of range [0, {num_nodes})", lineno)
            src.append(u)
            dst.append(v)
            ts.append(t)
            feats.append(f)
    feat = np.asarray(feats, dtype=np.float64).reshape(len(ts), width - 3)
    return TemporalGraph(src, dst, ts, feat, num_nodes, bipartite_boundary)


def save_events(path: str, g: TemporalGraph) -> None:
    d_e = g.d_edge
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "t"] + [f"f{i}" for i in range(d_e)])
        for k in range(g.num_events):
            w.writerow([int(g.src[k]), int(g.dst[k]), repr(float(g.t[k]))]
                       + [repr(float(x)) for x in g.edge_feat[k]])
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(f"num_nodes={g.num_nodes}\n")
        b = g.bipartite_boundary
        fh.write(f"bipartite_boundary={'none' if b is None else b}\n")
        fh.write(f"d_e={d_e}\n")


def chronological_split(g, train_frac: float = 0.7, val_frac: float = 0.15):
    """Split events into contiguous train/val/test ranges by event count.

    ``g`` may be a graph or an event count.
    """
    n = g if isinstance(g, (int, np.integer)) else g.num_events
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ConfigError(f"bad split fractions {train_frac}, {val_frac}")
    a = int(round(train_frac * n))
    b = int(round((train_frac + val_frac) * n))
    return (0, a), (a, b), (b, n)


@dataclass
class NeighborBlock:
    nbr: np.ndarray
    eid: np.ndarray
    dt: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.nbr)


@dataclass
class MiniBatchSpec:
    """One chronological batch of positive events and their supporting nodes.

    ``pos_nbrs`` covers the roots ``[src; dst]``; ``neg`` holds one row of
    sampled destinations per negative group, and ``neg_nbrs[g]`` their
    supporting neighbors.
    """
    start: int
    end: int
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    pos_nbrs: NeighborBlock
    neg: Optional[np.ndarray] = None
    neg_nbrs: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.end - self.start

    @property
    def eid(self) -> np.ndarray:
        return np.arange(self.start, self.end)

    def events(self, g: TemporalGraph) -> list[Event]:
        return [g.event(k) for k in range(self.start, self.end)]


def make_batch(g: TemporalGraph, start: int, end: int, n_neighbors: int = 10) -> MiniBatchSpec:
    src, dst, t = g.src[start:end], g.dst[start:end], g.t[start:end]
    roots = np.concatenate([src, dst])
    nb = NeighborBlock(*g.recent_neighbors(roots, np.concatenate([t, t]), n_neighbors))
    return MiniBatchSpec(start, end, src, dst, t, nb)


def batch_ranges(rng: tuple[int, int], batch_size: int) -> list[tuple[int, int]]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    lo, hi = rng
    return [(s, min(s + batch_size, hi)) for s in range(lo, hi, batch_size)]


def make_batches(g: TemporalGraph, rng: tuple[int, int], batch_size: int,
                 n_neighbors: int = 10) -> list[MiniBatchSpec]:
    return [make_batch(g, s, e, n_neighbors) for s, e in batch_ranges(rng, batch_size)]


def sample_recent_neighbors(g: TemporalGraph, v: int, t: float, n: int):
    """The ``n`` most recent events incident to ``v`` strictly before ``t``.

    Returns a list of ``(neighbor, edge_feat, dt)``, most recent first.
    """
    nbr, eid, dt, mask = g.recent_neighbors([v], [t], n)
    return [(int(nbr[0, s]), g.edge_feat[eid[0, s]], float(dt[0, s]))
            for s in range(n) if mask[0, s]]


def sample_negatives(batch: MiniBatchSpec, g: TemporalGraph, num_groups: int,
                     rng_seed) -> np.ndarray:
    """Uniform destination samples, shape ``(num_groups, batch.size)``."""
    if num_groups < 1:
        raise ConfigError("num_groups must be >= 1")
    lo, hi = g.destination_range()
    if hi <= lo:
        raise ConfigError("destination partition is empty")
    rng = np.random.default_rng(rng_seed)
    return rng.integers(lo, hi, size=(num_groups, batch.size))


def attach_negatives(batch: MiniBatchSpec, g: TemporalGraph, neg: np.ndarray,
                     n_neighbors: int = 10) -> MiniBatchSpec:
    batch.neg = neg
    batch.neg_nbrs = [NeighborBlock(*g.recent_neighbors(row, batch.t, n_neighbors)) for row in neg]
    return batch


def captured_events_analysis(g: TemporalGraph, batch_size: int,
                             rng: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Per-node count of events whose mail survives most-recent-mail selection.

    A node keeps one mail per batch it appears in, so its captured count is the
    number of distinct batches touching it.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    lo, hi = rng if rng is not None else (0, g.num_events)
    k = np.arange(lo, hi)
    src, dst = g.src[lo:hi], g.dst[lo:hi]
    loop = src == dst
    nodes = np.concatenate([src, dst[~loop]])
    bid = np.concatenate([(k - lo) // batch_size, ((k - lo) // batch_size)[~loop]])
    key = np.unique(bid * g.num_nodes + nodes)
    return np.bincount(key % g.num_nodes, minlength=g.num_nodes)


def event_degree(g: TemporalGraph, rng: Optional[tuple[int, int]] = None) -> np.ndarray:
    lo, hi = rng if rng is not None else (0, g.num_events)
    return captured_events_analysis(g, 1, (lo, hi))
