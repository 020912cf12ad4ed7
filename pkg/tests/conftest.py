import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tgpar.synth import SynthConfig, generate
from tgpar.tgraph import TemporalGraph

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(seed, n_events=120, n_nodes=15, d_e=0, ties=True, bipartite=False):
    rng = np.random.default_rng(seed)
    if bipartite:
        b = n_nodes // 2
        src = rng.integers(0, b, n_events)
        dst = rng.integers(b, n_nodes, n_events)
    else:
        src = rng.integers(0, n_nodes, n_events)
        dst = rng.integers(0, n_nodes, n_events)
        b = None
    t = rng.integers(0, n_events // 3 + 1, n_events).astype(float) if ties else rng.random(n_events) * 100
    feat = rng.normal(size=(n_events, d_e)) if d_e else None
    return TemporalGraph(src, dst, t, feat, num_nodes=n_nodes, bipartite_boundary=b)


@pytest.fixture
def small_synth():
    return generate(SynthConfig(users=30, items=20, events=500, communities=3, seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
