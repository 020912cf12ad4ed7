import numpy as np
import pytest
from hypothesis import given, strategies as st

import gradcheck as G
from tgpar import nn


@pytest.mark.parametrize("op", sorted(G.OPS))
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_central_differences(op, seed):
    rng = np.random.default_rng(1000 + seed)
    for _ in range(5):
        assert G.OPS[op](rng) < 1e-4


def test_rel_err_floor():
    assert G.rel_err([1.0], [1.0 + 1e-6]) < 1e-5
    assert G.rel_err([1e-12], [-1e-12]) < 1e-6
    assert G.rel_err([1.0], [2.0]) == 0.5


def test_time_encode_zero_and_negative():
    om = np.array([0.5, 3.0])
    np.testing.assert_array_equal(nn.time_encode([0.0], om), [[1.0, 1.0]])
    with pytest.raises(ValueError):
        nn.time_encode([-1.0], om)


def test_mail_layout():
    om = np.array([1.0, 2.0])
    m = nn.make_mail(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 0.0, np.array([9.0]), om)
    np.testing.assert_array_equal(m, [1, 2, 3, 4, 1, 1, 9])
    mu, mv = nn.make_mails(np.ones(2), np.zeros(2), 0.0, 0.0, np.zeros(0), om)
    assert mu.shape == (6,) and mu[0] == 1 and mv[0] == 0
    with pytest.raises(nn.ShapeError):
        nn.make_mail(np.ones(2), np.ones(3), 0.0, np.zeros(0), om)


def test_expand_mail_matches_make_mail():
    rng = np.random.default_rng(0)
    om = rng.uniform(size=3)
    s1, s2, e = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    dt = rng.uniform(size=4)
    raw = np.concatenate([s1, s2, e], 1)
    np.testing.assert_array_equal(nn.expand_mail(raw, dt, om, 2), nn.make_mail(s1, s2, dt, e, om))


def _params(seed=0, **kw):
    dims = nn.ModelDims(**{"num_nodes": 6, "d_mem": 4, "d_time": 3, "d_edge": 1, "d_static": 2, **kw})
    return G.random_params(np.random.default_rng(seed), dims)


def test_gru_zero_gate_keeps_memory():
    p = _params()
    p.tensors["gru.W_z"][...] = 0
    p.tensors["gru.b_z"][...] = -50.0
    s = np.random.default_rng(1).normal(size=(3, 4))
    m = np.zeros((3, p.dims.d_mail))
    np.testing.assert_allclose(nn.gru_update(s, m, p), s, atol=1e-12)
    assert nn.gru_update(s[0], m[0], p).shape == (4,)


def test_gru_shape_error():
    p = _params()
    with pytest.raises(nn.ShapeError):
        nn.gru_forward(np.zeros((2, 4)), np.zeros((2, 3)), p)


def test_attention_without_neighbors_is_zero():
    p = _params()
    d = p.dims
    out, _ = nn.attention_forward(np.ones((2, d.d_node + d.d_time)),
                                  np.ones((2, 3, d.d_node + d.d_edge + d.d_time)),
                                  np.zeros((2, 3), bool), p)
    np.testing.assert_array_equal(out, 0.0)


def test_attention_single_neighbor_returns_value():
    p = _params()
    d = p.dims
    nbr = np.random.default_rng(2).normal(size=(1, 1, d.d_node + d.d_edge + d.d_time))
    out, _ = nn.attention_forward(np.ones((1, d.d_node + d.d_time)), nbr, np.ones((1, 1), bool), p)
    np.testing.assert_allclose(out[0], nbr[0, 0] @ p["attn.W_v"].T + p["attn.b_v"])


@given(st.integers(0, 10 ** 6))
def test_attention_ignores_masked_slots(seed):
    rng = np.random.default_rng(seed)
    p = _params(seed % 97)
    d = p.dims
    root, nbr, mask = G.attention_instance(rng, d, 3, 4)
    a, _ = nn.attention_forward(root, nbr, mask, p)
    nbr2 = nbr.copy()
    nbr2[~mask] = rng.normal(size=(int((~mask).sum()), nbr.shape[2])) * 1e3
    b, _ = nn.attention_forward(root, nbr2, mask, p)
    np.testing.assert_array_equal(a, b)


def test_zero_decoder_gives_log2_loss():
    from tgpar.trainer import bce_loss
    p = _params()
    for k in ("dec.W1", "dec.b1", "dec.w2", "dec.b2"):
        p.tensors[k][...] = 0
    logit = nn.decode_link(np.ones(p.dims.d_out), np.ones(p.dims.d_out), p)
    assert logit.tolist() == [0.0]
    loss, _, _ = bce_loss(logit, logit)
    assert loss == pytest.approx(2 * np.log(2))


def test_init_is_deterministic_and_shaped():
    d = nn.ModelDims(10, 8, 4, 2, 3)
    a, b = nn.ModelParams.init(d, 5, 100.0), nn.ModelParams.init(d, 5, 100.0)
    assert a.digest() == b.digest()
    assert a.digest() != nn.ModelParams.init(d, 6, 100.0).digest()
    for name, shape in d.shapes().items():
        assert a[name].shape == shape
    assert a.size == a.flat().size
    np.testing.assert_array_equal(a["static.table"], 0.0)
    assert np.all(np.diff(a["time.omega"]) > 0)


def test_flat_roundtrip():
    p = _params()
    v = p.flat() * 2
    q = p.copy()
    q.load_flat(v)
    np.testing.assert_array_equal(q.flat(), v)
    assert p.digest() != q.digest()
    with pytest.raises(nn.ShapeError):
        q.load_flat(v[:-1])


def test_checkpoint_roundtrip(tmp_path):
    p = _params(3)
    path = str(tmp_path / "m.ckpt")
    nn.save_checkpoint(path, p)
    q = nn.load_checkpoint(path)
    assert q.dims == p.dims and q.digest() == p.digest()
    head = open(path, "rb").read().split(b"END\n")[0].decode()
    assert head.startswith("TGPAR-CKPT 1\ndims 6 4 3 1 2\n")


def test_checkpoint_truncated(tmp_path):
    p = _params(3)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(str(path), p)
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(nn.ShapeError):
        nn.load_checkpoint(str(path))


def test_non_finite_detected():
    p = _params()
    s = np.full((1, 4), np.nan)
    with pytest.raises(nn.NumericError):
        nn.gru_forward(s, np.zeros((1, p.dims.d_mail)), p)


def test_tape_kind_checked():
    p = _params()
    _, tape = nn.decoder_forward(np.zeros((1, 4)), np.zeros((1, 4)), p)
    with pytest.raises(ValueError):
        nn.gru_backward(tape, np.zeros((1, 4)), p)
