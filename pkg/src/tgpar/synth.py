"""Synthetic bipartite event streams with planted structure.

Users belong to communities; each community prefers its own slice of items,
item popularity inside a slice is Zipf-like, and with probability
``burst_prob`` a user repeats its previous item in a short burst. A model
that tracks node state can exploit both the community preference (slow,
time-invariant) and the bursts (fast, recency-driven).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tgraph import TemporalGraph


@dataclass
class SynthConfig:
    users: int = 200
    items: int = 100
    events: int = 5000
    communities: int = 5
    affinity: float = 0.9      # probability an interaction stays within the user's community
    zipf: float = 1.2
    burst_prob: float = 0.3
    d_edge: int = 0
    seed: int = 0


def generate(cfg: SynthConfig) -> TemporalGraph:
    rng = np.random.default_rng(cfg.seed)
    U, I, C = cfg.users, cfg.items, cfg.communities
    user_comm = rng.integers(0, C, size=U)
    item_comm = np.arange(I) % C
    rank_in_comm = np.arange(I) // C
    pop = 1.0 / (1.0 + rank_in_comm) ** cfg.zipf
    by_comm = [np.flatnonzero(item_comm == c) for c in range(C)]
    probs = [pop[ix] / pop[ix].sum() for ix in by_comm]
    activity = rng.pareto(2.0, size=U) + 1.0
    activity /= activity.sum()

    src = np.empty(cfg.events, dtype=np.int64)
    dst = np.empty(cfg.events, dtype=np.int64)
    last = np.full(U, -1, dtype=np.int64)
    users = rng.choice(U, size=cfg.events, p=activity)
    coin = rng.random((cfg.events, 2))
    for e, u in enumerate(users):
        if last[u] >= 0 and coin[e, 0] < cfg.burst_prob:
            item = last[u]
        else:
            c = user_comm[u] if coin[e, 1] < cfg.affinity else rng.integers(0, C)
            item = by_comm[c][rng.choice(len(by_comm[c]), p=probs[c])]
        src[e], dst[e] = u, item
        last[u] = item
    t = np.cumsum(rng.exponential(1.0, size=cfg.events))
    feat = None
    if cfg.d_edge:
        feat = rng.normal(0, 0.1, size=(cfg.events, cfg.d_edge))
        feat[:, 0] += item_comm[dst] / max(C - 1, 1)
    return TemporalGraph(src, dst + U, t, feat, num_nodes=U + I, bipartite_boundary=U)
