import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import gradcheck as G
from conftest import random_graph
from tgpar import nn
from tgpar.memstore import MemoryRows, init_state
from tgpar.tgraph import TemporalGraph, make_batch
from tgpar.trainer import (Adam, BatchStore, TrainingError, bce_loss, build_step_input,
                           eval_negatives, evaluate_mrr, memory_writeback, model_backward,
                           model_forward, mrr_from_logits, scatter_add_rows, step_compute)


def _setup(seed, d_e=2):
    g = random_graph(seed, n_events=60, n_nodes=10, d_e=d_e, ties=False, bipartite=True)
    dims = nn.ModelDims(g.num_nodes, 3, 2, d_e, 2)
    rng = np.random.default_rng(seed)
    p = G.random_params(rng, dims)
    store = BatchStore(g, (0, 60), 12, 1, 4, 3, seed)
    spec = store.get(3)
    inp = build_step_input(spec, 1)
    U = len(inp.nodes)
    mem_ts = rng.uniform(0, 10, U)
    rows = MemoryRows(rng.normal(size=(U, dims.d_mem)), mem_ts,
                      rng.normal(size=(U, dims.d_mail_raw)), mem_ts + rng.uniform(0, 5, U))
    return g, p, inp, rows


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    g, p, inp, rows = _setup(seed)
    fwd = model_forward(p, g, inp, rows)
    grads = model_backward(p, g, inp, fwd)
    assert set(grads) == set(p.names())
    f = lambda: model_forward(p, g, inp, rows).loss
    for name in p.names():
        fd = nn.finite_difference(f, p.tensors[name], G.EPS)
        assert G.rel_err(grads[name], fd) < 1e-4, name


def test_static_grad_only_on_touched_rows():
    g, p, inp, rows = _setup(0)
    grads = model_backward(p, g, inp, model_forward(p, g, inp, rows))
    untouched = np.setdiff1d(np.arange(g.num_nodes), inp.nodes)
    np.testing.assert_array_equal(grads["static.table"][untouched], 0.0)


def test_bce_examples():
    assert bce_loss(np.zeros(3), np.zeros(4))[0] == pytest.approx(2 * math.log(2))
    assert bce_loss(np.array([0.0]), np.array([0.0]))[0] == pytest.approx(1.386, abs=1e-3)
    assert bce_loss(np.array([60.0]), np.array([-60.0]))[0] < 1e-20
    assert math.isfinite(bce_loss(np.array([-800.0]), np.array([800.0]))[0])
    with pytest.raises(ValueError):
        bce_loss(np.zeros(0), np.zeros(2))


def test_writes_only_roots_with_latest_mail():
    g, p, inp, rows = _setup(1)
    fwd = model_forward(p, g, inp, rows)
    w = memory_writeback(g, inp, rows, fwd.s_new)
    roots = np.union1d(inp.src, inp.dst)
    np.testing.assert_array_equal(w.idx, roots)
    for k, v in enumerate(w.idx):
        last = max(e for e in range(len(inp.src)) if v in (inp.src[e], inp.dst[e]))
        assert w.mail_ts[k] == inp.t[last]
        at = np.searchsorted(inp.nodes, v)
        np.testing.assert_array_equal(w.mem[k], fwd.s_new[at])
        assert w.mem_ts[k] == rows.mail_ts[at]
        other = inp.dst[last] if inp.src[last] == v else inp.src[last]
        d = p.dims.d_mem
        np.testing.assert_array_equal(w.mail[k][:d], fwd.s_new[at])
        np.testing.assert_array_equal(w.mail[k][d:2 * d], fwd.s_new[np.searchsorted(inp.nodes, other)])
        np.testing.assert_array_equal(w.mail[k][2 * d:], g.edge_feat[inp.eid[last]])


def test_first_batch_memory_comes_from_mails_only():
    g, p, inp, _ = _setup(2)
    U = len(inp.nodes)
    z = MemoryRows(np.zeros((U, 3)), np.zeros(U), np.zeros((U, p.dims.d_mail_raw)), np.zeros(U))
    fwd = model_forward(p, g, inp, z)
    # zero memory and zero mail: every node gets the same GRU output
    assert np.allclose(fwd.s_new, fwd.s_new[0])


def test_stale_mail_rejected():
    g, p, inp, rows = _setup(0)
    bad = rows._replace(mail_ts=rows.mem_ts - 1)
    with pytest.raises(TrainingError):
        model_forward(p, g, inp, bad)


def test_scatter_add_rows_matches_add_at():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 7, 50)
    vals = rng.normal(size=(50, 3))
    want = np.zeros((7, 3))
    np.add.at(want, idx, vals)
    np.testing.assert_allclose(scatter_add_rows(idx, vals, 7), want, atol=1e-12)
    assert scatter_add_rows(idx[:0], vals[:0], 4).shape == (4, 3)


def test_adam_matches_reference_formula():
    g = np.array([0.5, -2.0])
    x = np.array([1.0, 1.0])
    opt = Adam(2, 0.1)
    opt.step(x, g)
    # first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(x, [0.9, 1.1], atol=1e-7)
    opt.step(x, g)
    m = 0.1 * g + 0.9 * (0.1 * g)
    v = 0.001 * g * g + 0.999 * (0.001 * g * g)
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(x, [0.9, 1.1] - step)


def test_mrr_examples():
    pos = np.array([5.0, 5.0])
    np.testing.assert_array_equal(mrr_from_logits(pos, np.zeros((2, 49))), [1.0, 1.0])
    neg = np.zeros((2, 49))
    neg[:, 0] = 9
    np.testing.assert_array_equal(mrr_from_logits(pos, neg), [0.5, 0.5])
    # ties rank pessimistically: all-equal scores give the last place
    assert mrr_from_logits(np.zeros(1), np.zeros((1, 49)))[0] == 1 / 50


def test_random_scores_mrr_monte_carlo():
    rng = np.random.default_rng(7)
    n = 100_000
    rr = mrr_from_logits(rng.random(n), rng.random((n, 49)))
    closed = sum(1 / r for r in range(1, 51)) / 50
    assert closed == pytest.approx(0.0899, abs=1e-4)
    assert rr.mean() == pytest.approx(closed, abs=3 * rr.std() / math.sqrt(n))


@given(st.integers(0, 10 ** 6), st.integers(0, 30))
def test_eval_negatives_exclude_truth(seed, lo):
    rng = np.random.default_rng(seed)
    hi = lo + 2 + seed % 5
    dst = rng.integers(lo, hi, 20)
    neg = eval_negatives(rng, dst, lo, hi, 49)
    assert neg.shape == (20, 49)
    assert np.all((neg >= lo) & (neg < hi)) and np.all(neg != dst[:, None])


def test_evaluate_mrr_deterministic_and_bounded(small_synth):
    g = small_synth
    p = nn.ModelParams.init(nn.ModelDims(g.num_nodes, 4, 4, 0, 4), 0, g.max_t)
    a = evaluate_mrr(p, g, (350, 425), seed=3, batch_size=25, n_neighbors=5)
    b = evaluate_mrr(p, g, (350, 425), seed=3, batch_size=25, n_neighbors=5)
    assert a == b and a.num_queries == 75
    assert 1 / 50 <= a.mrr <= 1.0


def test_step_compute_result(small_synth):
    g = small_synth
    p = nn.ModelParams.init(nn.ModelDims(g.num_nodes, 4, 4, 0, 4), 0, g.max_t)
    store = BatchStore(g, (0, 350), 50, 1, 5, 2, 0)
    inp = build_step_input(store.get(0), 0)
    state = init_state(g.num_nodes, 4, p.dims.d_mail_raw)
    res, grads, payload = step_compute(p, g, inp, state.gather(inp.nodes))
    assert math.isfinite(res.loss) and res.grad_norm > 0 and res.wall >= 0


def test_batch_store_local_split_and_cache(small_synth):
    store = BatchStore(small_synth, (0, 350), 100, 3, 5, 4, 0)
    assert store.n_batches == 4
    assert [store.local_size(0, a) for a in range(3)] == [34, 33, 33]
    assert store.get(1, 2) is store.get(1, 2)
    assert store.get(1, 2).neg.shape == (4, 33)
    store.prefetch([(2, 0), (2, 1)]).join()
    assert (2, 1) in store._cache
