import threading
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tgpar.config import TrainConfig
from tgpar.memstore import validate_oplog
from tgpar.parallel import (AllReduce, PlannerError, build_assignment, make_barrier,
                            plan_config, schedule_epoch, schedule_memory, schedule_minibatch,
                            split_even, sync_weights, traversal_budget)


def test_planner_examples():
    assert plan_config(4, 8, 3200, 1600, 2) == (2, 2, 8)
    assert plan_config(1, 1, 600, 600, 1) == (1, 1, 1)
    assert plan_config(1, 8, 600, 600, 8) == (1, 1, 8)


def test_planner_errors():
    with pytest.raises(PlannerError, match="exceeds"):
        plan_config(1, 2, 10_000, 100, 1)
    with pytest.raises(PlannerError, match="positive"):
        plan_config(4, 2, 200, 100, 0)
    with pytest.raises(PlannerError):
        plan_config(0, 1, 1, 1, 1)


@given(st.integers(1, 8), st.integers(1, 16), st.integers(1, 10_000), st.integers(1, 5000),
       st.integers(1, 8))
def test_planner_property(p, q, safe, sat, copies):
    try:
        i, j, k = plan_config(p, q, safe, sat, copies)
    except PlannerError:
        return
    assert i * j * k == p * q and k >= p
    assert q % i == 0 and i >= -(-safe // sat)
    assert k <= p * copies


def test_schedule_minibatch():
    assert schedule_minibatch((0, 600), 3) == [(0, 200), (200, 400), (400, 600)]
    assert schedule_minibatch((5, 9), 1) == [(5, 9)]
    assert split_even((0, 7), 3) == [(0, 3), (3, 5), (5, 7)]


def test_schedule_memory_rotation():
    assert schedule_memory(6, 1) == [list(range(6))]
    sweeps = schedule_memory(6, 3)
    assert sweeps == [[0, 1, 2, 3, 4, 5], [2, 3, 4, 5, 0, 1], [4, 5, 0, 1, 2, 3]]
    assert all(sorted(s) == list(range(6)) for s in sweeps)


@pytest.mark.parametrize("j", [1, 2, 3, 4])
def test_schedule_epoch(j):
    slots = schedule_epoch(9, j, seed=1, num_groups=10)
    by_batch = defaultdict(list)
    for slot, tasks in enumerate(slots):
        for t in tasks:
            if t.role != "idle":
                by_batch[t.batch].append((t.iteration, slot, t.role, t.neg_group))
    assert sorted(by_batch) == list(range(9))
    for b, uses in by_batch.items():
        uses.sort()
        assert [u[0] for u in uses] == list(range(b, b + j))  # consecutive iterations
        assert len({u[3] for u in uses}) == j                   # distinct negative groups
        assert [u[2] for u in uses].count("writer") == 1 and uses[0][2] == "writer"
    if j == 1:
        assert [t.batch for t in slots[0]] == list(range(9))


@pytest.mark.parametrize("ijk", [(1, 1, 1), (2, 1, 1), (1, 3, 1), (1, 1, 3), (2, 2, 2)])
@pytest.mark.parametrize("epochs", [1.0, 2.5])
def test_assignment_invariants(ijk, epochs):
    i, j, k = ijk
    cfg = TrainConfig(i=i, j=j, k=k, epochs=epochs, num_neg_groups=4)
    n_b = 7
    a = build_assignment(cfg, n_b)
    assert len(a.tasks) == i * j * k and all(len(t) == a.n_iters for t in a.tasks)
    writers = Counter()
    uses = Counter()
    for rank, tl in enumerate(a.tasks):
        m, slot, loc = a.locate(rank)
        assert a.rank(m, slot, loc) == rank
        per_epoch = defaultdict(list)
        for t in tl:
            if t.role == "idle":
                continue
            assert t.local == loc
            uses[(m, t.step, t.local)] += 1
            if t.role == "writer":
                writers[(m, t.step, t.local)] += 1
                per_epoch[t.epoch].append(t.batch)
        for bs in per_epoch.values():
            assert bs == sorted(bs)  # chronological within a memory epoch
    assert set(writers.values()) == {1}
    assert set(uses.values()) == {j}
    # traversal budget: total batch traversals equals epochs * batches, rounded up to a step
    total_steps = sum(len(s) for s in a.steps)
    assert total_steps * j >= epochs * n_b > (total_steps - 1) * j
    # daemon steps rotate slots so the grammar window advances by one each step
    for steps in a.steps:
        assert [s.slot for s in steps] == [x % j for x in range(len(steps))]


def test_memory_groups_start_staggered():
    cfg = TrainConfig(k=3, epochs=3.0)
    a = build_assignment(cfg, 6)
    firsts = [steps[0].batch for steps in a.steps]
    assert firsts == [0, 2, 4]
    assert all(steps[0].reset for steps in a.steps)
    for steps in a.steps:
        for s in steps:
            assert s.reset == (s.batch == 0 or s is steps[0])


def test_assignment_dump(tmp_path):
    a = build_assignment(TrainConfig(i=2, j=2), 3)
    p = tmp_path / "a.csv"
    a.dump(str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == "trainer,iter,epoch,segment,batch,local,neg_group,role"
    assert len(lines) == 1 + 4 * a.n_iters


def test_traversal_budget():
    assert traversal_budget(100, 1, 10) == 1000
    assert traversal_budget(100, 8, 10) == 125
    assert traversal_budget(3, 1) == 3
    with pytest.raises(ValueError):
        traversal_budget(1, 0)


def test_sync_weights():
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sync_weights([g, g, g]), g)
    np.testing.assert_array_equal(sync_weights([np.zeros(2), g]), g / 2)
    np.testing.assert_array_equal(sync_weights([g, g], [True, False]), g)
    with pytest.raises(ValueError):
        sync_weights([g, np.zeros(3)])


def test_allreduce_identical_across_threads():
    n, size = 4, 5
    ar = AllReduce(n, size, make_barrier(n))
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(3, n, size))
    out = defaultdict(list)

    def worker(r):
        for it in range(3):
            out[r].append(ar.average(r, it, grads[it, r] if (r + it) % 3 else None))

    ths = [threading.Thread(target=worker, args=(r,)) for r in range(n)]
    for t in ths:
        t.start()
    for t in ths:
        t.join()
    for it in range(3):
        ref = out[0][it]
        for r in range(n):
            assert np.array_equal(out[r][it].view(np.uint64), ref.view(np.uint64))
        active = [r for r in range(n) if (r + it) % 3]
        np.testing.assert_allclose(ref, grads[it, active].mean(0))
    with pytest.raises(ValueError):
        AllReduce(1, 3, make_barrier(1)).average(0, 0, np.zeros(4))
