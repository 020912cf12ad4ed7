import pytest
from hypothesis import given, strategies as st

from tgpar.config import TrainConfig, dump_config, parse_config
from tgpar.synth import SynthConfig, generate
from tgpar.tgraph import ConfigError


def test_defaults_valid():
    cfg = TrainConfig().validate()
    assert (cfg.i, cfg.j, cfg.k, cfg.q) == (1, 1, 1, 1)
    assert cfg.effective_lr == cfg.lr_base


def test_linear_lr_scaling():
    cfg = TrainConfig(k=8, local_batch=600, lr_base=1e-3)
    assert cfg.global_batch == 4800 and cfg.effective_lr == pytest.approx(8e-3)
    assert cfg.replace(lr_scaling="none").effective_lr == 1e-3


@pytest.mark.parametrize("kw,msg", [
    (dict(i=2, p=1, q=1), "i\\*j\\*k"),
    (dict(k=1, p=2, q=1, i=2), "k=1 must be >= machine count"),
    (dict(j=2, k=3, p=2, q=3), "must fit on one machine"),
    (dict(j=11), "negative groups"),
    (dict(backend="gpu"), "backend"),
    (dict(local_batch=0), "local_batch"),
])
def test_validation_messages(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        TrainConfig(**kw).validate()


def test_parse_and_dump_roundtrip():
    cfg = parse_config("i = 2  # comment\nepochs=2.5\nfrozen=yes\nq=none\n", {"seed": "7"})
    assert cfg.i == 2 and cfg.epochs == 2.5 and cfg.frozen and cfg.seed == 7 and cfg.q == 2
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["i", "zzz=1", "i=two", "frozen=maybe"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@given(st.integers(1, 50), st.integers(2, 30), st.integers(1, 400), st.floats(0, 1), st.integers(0, 3))
def test_synth_is_bipartite_and_deterministic(users, items, events, burst, d_e):
    sc = SynthConfig(users=users, items=items, events=events, burst_prob=burst, d_edge=d_e,
                     communities=min(3, items), seed=users)
    g, h = generate(sc), generate(sc)
    assert g.num_events == events and g.num_nodes == users + items and g.d_edge == d_e
    assert (g.src < users).all() and (g.dst >= users).all()
    assert (g.t == h.t).all() and (g.dst == h.dst).all()


def test_bursts_repeat_items():
    rep = []
    for p in (0.0, 0.8):
        g = generate(SynthConfig(users=5, items=50, events=2000, burst_prob=p, seed=1))
        last, same = {}, 0
        for u, v in zip(g.src, g.dst):
            same += last.get(u) == v
            last[u] = v
        rep.append(same / g.num_events)
    assert rep[1] > rep[0] + 0.5
