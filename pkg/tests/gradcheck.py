"""Central-difference oracles for every differentiable op.

Each ``check_*`` builds a random instance, reduces the op output to a scalar
with a fixed random projection, and returns the worst relative error between
the analytic gradient and central differences over all inputs and parameters.
"""
import numpy as np

from tgpar import nn
from tgpar.trainer import bce_loss

EPS = 1e-5
FLOOR = 1e-5  # below this, central differences are dominated by roundoff (|f| * 1e-16 / EPS)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), FLOOR)
    return float(np.max(np.abs(a - b) / den))


def random_params(rng, dims):
    p = nn.ModelParams.init(dims, int(rng.integers(1 << 30)), max_t=10.0)
    for name in p.names():
        if name != "time.omega":
            p.tensors[name][...] = rng.normal(0, 0.5, size=p.tensors[name].shape)
    p.tensors["time.omega"][...] = rng.uniform(0.1, 2.0, size=dims.d_time)
    return p


def random_dims(rng, d_edge=None):
    return nn.ModelDims(num_nodes=int(rng.integers(3, 9)), d_mem=int(rng.integers(2, 9)),
                        d_time=int(rng.integers(1, 9)),
                        d_edge=int(rng.integers(0, 4)) if d_edge is None else d_edge,
                        d_static=int(rng.integers(0, 9)))


def _worst(f, analytic: dict, arrays: dict):
    worst = 0.0
    for name, x in arrays.items():
        worst = max(worst, rel_err(analytic[name], nn.finite_difference(f, x, EPS)))
    return worst


def check_time_encode(rng):
    n, d = int(rng.integers(1, 8)), int(rng.integers(1, 16))
    dt = rng.uniform(0.1, 3.0, size=n)
    omega = rng.uniform(0.1, 2.0, size=d)
    R = rng.normal(size=(n, d))
    f = lambda: float(np.sum(nn.time_encode(dt, omega) * R))
    d_om, d_dt = nn.time_encode_backward(dt, omega, R)
    return _worst(f, {"omega": d_om, "dt": d_dt}, {"omega": omega, "dt": dt})


def check_gru(rng):
    dims = random_dims(rng)
    p = random_params(rng, dims)
    n = int(rng.integers(1, 8))
    s = rng.normal(size=(n, dims.d_mem))
    m = rng.normal(size=(n, dims.d_mail))
    R = rng.normal(size=(n, dims.d_mem))
    f = lambda: float(np.sum(nn.gru_forward(s, m, p)[0] * R))
    out, tape = nn.gru_forward(s, m, p)
    grads, d_m = nn.gru_backward(tape, R, p)
    grads = dict(grads, m=d_m)
    arrays = {k: p.tensors[k] for k in grads if k.startswith("gru.")}
    arrays["m"] = m
    return _worst(f, grads, arrays)


def attention_instance(rng, dims, R_roots=None, n=None):
    R_roots = R_roots or int(rng.integers(1, 6))
    n = n or int(rng.integers(1, 6))
    root_in = rng.normal(size=(R_roots, dims.d_node + dims.d_time))
    nbr_in = rng.normal(size=(R_roots, n, dims.d_node + dims.d_edge + dims.d_time))
    mask = rng.random((R_roots, n)) < 0.7
    mask[0, :] = False  # one root without neighbors
    if R_roots > 1:
        mask[1, 0] = True
    return root_in, nbr_in, mask


def check_attention(rng):
    dims = random_dims(rng)
    p = random_params(rng, dims)
    root_in, nbr_in, mask = attention_instance(rng, dims)
    R = rng.normal(size=(len(root_in), dims.d_out))
    f = lambda: float(np.sum(nn.attention_forward(root_in, nbr_in, mask, p)[0] * R))
    _, tape = nn.attention_forward(root_in, nbr_in, mask, p)
    grads, d_root, d_nbr = nn.attention_backward(tape, R, p)
    grads = dict(grads, root=d_root, nbr=d_nbr)
    arrays = {k: p.tensors[k] for k in grads if k.startswith("attn.")}
    arrays.update(root=root_in, nbr=nbr_in)
    return _worst(f, grads, arrays)


def check_decoder(rng):
    dims = random_dims(rng)
    p = random_params(rng, dims)
    n = int(rng.integers(1, 8))
    while True:
        h_u = rng.normal(size=(n, dims.d_out))
        h_v = rng.normal(size=(n, dims.d_out))
        z1 = np.concatenate([h_u, h_v], 1) @ p["dec.W1"].T + p["dec.b1"]
        if np.abs(z1).min() > 1e-3:  # keep central differences off the ReLU kink
            break
    R = rng.normal(size=n)
    f = lambda: float(np.sum(nn.decoder_forward(h_u, h_v, p)[0] * R))
    _, tape = nn.decoder_forward(h_u, h_v, p)
    grads, d_u, d_v = nn.decoder_backward(tape, R, p)
    grads = dict(grads, h_u=d_u, h_v=d_v)
    arrays = {k: p.tensors[k] for k in grads if k.startswith("dec.")}
    arrays.update(h_u=h_u, h_v=h_v)
    return _worst(f, grads, arrays)


def check_bce(rng):
    pos = rng.normal(0, 3, size=int(rng.integers(1, 10)))
    neg = rng.normal(0, 3, size=int(rng.integers(0, 10)))
    _, d_pos, d_neg = bce_loss(pos, neg)
    f = lambda: bce_loss(pos, neg)[0]
    return _worst(f, {"pos": d_pos, "neg": d_neg}, {"pos": pos, "neg": neg})


OPS = {
    "time_encode": check_time_encode,
    "gru_update": check_gru,
    "attention": check_attention,
    "decoder": check_decoder,
    "bce_loss": check_bce,
}
