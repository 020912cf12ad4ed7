"""Differentiable kernels with hand-written forward and backward passes.

Everything works on float64 numpy arrays. Each ``*_forward`` returns its
output plus a :class:`Tape` of saved activations; the matching ``*_backward``
consumes the tape and an upstream gradient and returns parameter gradients
(keyed like :class:`ModelParams`) plus gradients for the differentiable inputs.

Memory vectors fed into the GRU are constants: gradients stop at the stored
node memory, so only the current cell's weights are trained.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelDims:
    num_nodes: int
    d_mem: int = 100
    d_time: int = 100
    d_edge: int = 0
    d_static: int = 100

    @property
    def d_mail_raw(self) -> int:
        """Cached mail width: both memories and the edge feature, no time block."""
        return 2 * self.d_mem + self.d_edge

    @property
    def d_mail(self) -> int:
        return 2 * self.d_mem + self.d_time + self.d_edge

    @property
    def d_node(self) -> int:
        return self.d_mem + self.d_static

    @property
    def d_out(self) -> int:
        return self.d_mem

    @property
    def d_hidden(self) -> int:
        return self.d_mem

    def shapes(self) -> dict[str, tuple[int, ...]]:
        dm, dn, dt, de = self.d_mem, self.d_node, self.d_time, self.d_edge
        gin = self.d_mail + dm
        return {
            "gru.W_z": (dm, gin), "gru.b_z": (dm,),
            "gru.W_r": (dm, gin), "gru.b_r": (dm,),
            "gru.W_h": (dm, gin), "gru.b_h": (dm,),
            "attn.W_q": (self.d_out, dn + dt), "attn.b_q": (self.d_out,),
            "attn.W_k": (self.d_out, dn + de + dt), "attn.b_k": (self.d_out,),
            "attn.W_v": (self.d_out, dn + de + dt), "attn.b_v": (self.d_out,),
            "time.omega": (dt,),
            "static.table": (self.num_nodes, self.d_static),
            "dec.W1": (self.d_hidden, 2 * self.d_out), "dec.b1": (self.d_hidden,),
            "dec.w2": (self.d_hidden,), "dec.b2": (1,),
        }


class ModelParams:
    """Named parameter tensors in a fixed order (the flatten order)."""

    def __init__(self, dims: ModelDims, tensors: dict[str, np.ndarray]):
        shapes = dims.shapes()
        if set(tensors) != set(shapes):
            raise ShapeError(f"parameter names mismatch: {sorted(set(tensors) ^ set(shapes))}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.dims = dims
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in shapes}

    @classmethod
    def init(cls, dims: ModelDims, seed: int = 0, max_t: float = 1.0) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases and static table.

        Frequencies are log-spaced so that periods span from ``max_t`` down to
        ``1e-5 * max_t``.
        """
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in dims.shapes().items():
            if len(shape) == 2 and name != "static.table":
                bound = 1.0 / np.sqrt(shape[1])
                out[name] = rng.uniform(-bound, bound, size=shape)
            elif name == "dec.w2":
                bound = 1.0 / np.sqrt(shape[0])
                out[name] = rng.uniform(-bound, bound, size=shape)
            else:
                out[name] = np.zeros(shape)
        scale = 1.0 / max(max_t, 1.0)
        out["time.omega"] = np.logspace(0, 5, dims.d_time) * scale if dims.d_time else np.zeros(0)
        return cls(dims, out)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        if len(vec) != self.size:
            raise ShapeError(f"flat vector has {len(vec)} values, expected {self.size}")
        off = 0
        for a in self.tensors.values():
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.tensors.values():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def flatten_grads(grads: dict[str, np.ndarray], params: ModelParams) -> np.ndarray:
    return np.concatenate([grads[k].ravel() if k in grads else np.zeros(v.size)
                           for k, v in params.tensors.items()])


class Tape:
    """Saved forward activations for one op."""

    def __init__(self, op: str, **saved):
        self.op = op
        self.saved = saved

    def __getattr__(self, name):
        try:
            return self.saved[name]
        except KeyError:
            raise AttributeError(name) from None

    def expect(self, op: str) -> "Tape":
        if self.op != op:
            raise ShapeError(f"tape from {self.op!r} passed to {op} backward")
        return self


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- time encoding -----------------------------------------------------------

def time_encode(dt, omega: np.ndarray) -> np.ndarray:
    """cos(dt * omega) along a new trailing axis."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("time delta must be non-negative")
    return np.cos(dt[..., None] * omega)


def time_encode_backward(dt, omega: np.ndarray, grad: np.ndarray):
    """Returns ``(d_omega, d_dt)``."""
    dt = np.asarray(dt, dtype=np.float64)
    s = -np.sin(dt[..., None] * omega) * grad
    d_omega = (s * dt[..., None]).reshape(-1, len(omega)).sum(0)
    return d_omega, (s * omega).sum(-1)


# -- mails -------------------------------------------------------------------

def make_mail(s_self, s_other, dt, e, omega) -> np.ndarray:
    """{s_self || s_other || time(dt) || e}; 1-d inputs give one mail, 2-d give rows."""
    single = np.ndim(s_self) == 1
    s_self = np.atleast_2d(s_self)
    s_other = np.atleast_2d(s_other)
    if s_self.shape != s_other.shape:
        raise ShapeError(f"memory shapes differ: {s_self.shape} vs {s_other.shape}")
    dt = np.atleast_1d(np.asarray(dt, dtype=np.float64))
    e = np.asarray(e, dtype=np.float64)
    e = e.reshape(len(dt), -1) if e.size else np.zeros((len(dt), 0))
    if not (len(dt) == len(s_self) == len(e)):
        raise ShapeError("row counts of memories, deltas and edge features differ")
    out = np.concatenate([s_self, s_other, time_encode(dt, omega), e], axis=1)
    return out[0] if single else out


def make_mails(s_u, s_v, dt_u, dt_v, e, omega):
    """Both directed mails of an edge event (u-rooted, v-rooted)."""
    return make_mail(s_u, s_v, dt_u, e, omega), make_mail(s_v, s_u, dt_v, e, omega)


def expand_mail(raw: np.ndarray, dt: np.ndarray, omega: np.ndarray, d_mem: int) -> np.ndarray:
    """Insert the time block into cached raw mails ``{s_self||s_other||e}``."""
    return np.concatenate([raw[:, :2 * d_mem], time_encode(dt, omega), raw[:, 2 * d_mem:]], axis=1)


# -- GRU memory updater ------------------------------------------------------

def gru_forward(s: np.ndarray, m: np.ndarray, p) -> tuple[np.ndarray, Tape]:
    """One GRU step over rows; ``s`` (n, d_mem), ``m`` (n, d_mail)."""
    W_z, W_r, W_h = p["gru.W_z"], p["gru.W_r"], p["gru.W_h"]
    d_mail = m.shape[1]
    if W_z.shape[1] != d_mail + s.shape[1] or len(s) != len(m):
        raise ShapeError(f"gru input shapes {s.shape}, {m.shape} vs weight {W_z.shape}")
    x = np.concatenate([m, s], axis=1)
    z = sigmoid(x @ W_z.T + p["gru.b_z"])
    r = sigmoid(x @ W_r.T + p["gru.b_r"])
    xh = np.concatenate([m, r * s], axis=1)
    h = np.tanh(xh @ W_h.T + p["gru.b_h"])
    out = (1.0 - z) * s + z * h
    _finite(out, "gru output")
    return out, Tape("gru", s=s, x=x, xh=xh, z=z, r=r, h=h, d_mail=d_mail)


def gru_backward(tape: Tape, grad: np.ndarray, p) -> tuple[dict, np.ndarray]:
    """Returns ``(param_grads, d_mail)``; the incoming memory gets no gradient."""
    tape.expect("gru")
    s, x, xh, z, r, h, dm = tape.s, tape.x, tape.xh, tape.z, tape.r, tape.h, tape.d_mail
    if grad.shape != s.shape:
        raise ShapeError(f"upstream grad {grad.shape} vs memory {s.shape}")
    da_h = grad * z * (1.0 - h * h)
    da_z = grad * (h - s) * z * (1.0 - z)
    dxh = da_h @ p["gru.W_h"]
    da_r = dxh[:, dm:] * s * r * (1.0 - r)
    d_m = dxh[:, :dm] + (da_z @ p["gru.W_z"])[:, :dm] + (da_r @ p["gru.W_r"])[:, :dm]
    grads = {
        "gru.W_z": da_z.T @ x, "gru.b_z": da_z.sum(0),
        "gru.W_r": da_r.T @ x, "gru.b_r": da_r.sum(0),
        "gru.W_h": da_h.T @ xh, "gru.b_h": da_h.sum(0),
    }
    return grads, d_m


def gru_update(s, m, p) -> np.ndarray:
    squeeze = np.ndim(s) == 1
    out, _ = gru_forward(np.atleast_2d(s), np.atleast_2d(m), p)
    return out[0] if squeeze else out


# -- static memory -------------------------------------------------------------

def combine_static(s_dyn: np.ndarray, static: np.ndarray) -> np.ndarray:
    return np.concatenate([s_dyn, static], axis=-1)


# -- temporal attention ------------------------------------------------------

def attention_forward(root_in: np.ndarray, nbr_in: np.ndarray, mask: np.ndarray, p,
                      ) -> tuple[np.ndarray, Tape]:
    """Single-head temporal attention over recent neighbors.

    root_in: (R, d_node + d_time) rows ``{s_v||static_v||time(0)}``.
    nbr_in: (R, n, d_node + d_edge + d_time) rows ``{S_w||E_vw||time(dt)}``.
    mask: (R, n) valid neighbor slots. Roots with no neighbors output zeros.
    """
    W_q, W_k, W_v = p["attn.W_q"], p["attn.W_k"], p["attn.W_v"]
    if root_in.shape[1] != W_q.shape[1] or nbr_in.shape[2] != W_k.shape[1]:
        raise ShapeError(f"attention inputs {root_in.shape}, {nbr_in.shape}")
    q = root_in @ W_q.T + p["attn.b_q"]
    K = nbr_in @ W_k.T + p["attn.b_k"]
    V = nbr_in @ W_v.T + p["attn.b_v"]
    cnt = mask.sum(1)
    scale = 1.0 / np.sqrt(np.maximum(cnt, 1))
    a = np.einsum("rd,rnd->rn", q, K) * scale[:, None]
    a = np.where(mask, a, -np.inf)
    amax = np.where(cnt > 0, a.max(1, initial=-np.inf), 0.0)
    w = np.where(mask, np.exp(a - amax[:, None]), 0.0)
    tot = w.sum(1)
    alpha = w / np.where(tot > 0, tot, 1.0)[:, None]
    out = np.einsum("rn,rnd->rd", alpha, V)
    _finite(out, "attention output")
    return out, Tape("attention", root_in=root_in, nbr_in=nbr_in, mask=mask, q=q, K=K, V=V,
                     alpha=alpha, scale=scale)


def attention_backward(tape: Tape, grad: np.ndarray, p) -> tuple[dict, np.ndarray, np.ndarray]:
    """Returns ``(param_grads, d_root_in, d_nbr_in)``."""
    tape.expect("attention")
    q, K, V, alpha, scale = tape.q, tape.K, tape.V, tape.alpha, tape.scale
    if grad.shape != q.shape:
        raise ShapeError(f"upstream grad {grad.shape} vs output {q.shape}")
    d_alpha = np.einsum("rd,rnd->rn", grad, V)
    dV = alpha[:, :, None] * grad[:, None, :]
    da = alpha * (d_alpha - (alpha * d_alpha).sum(1, keepdims=True))
    da = da * scale[:, None]
    dq = np.einsum("rn,rnd->rd", da, K)
    dK = da[:, :, None] * q[:, None, :]
    root_in, nbr_in = tape.root_in, tape.nbr_in
    flat_in = nbr_in.reshape(-1, nbr_in.shape[2])
    dK2 = dK.reshape(-1, dK.shape[2])
    dV2 = dV.reshape(-1, dV.shape[2])
    grads = {
        "attn.W_q": dq.T @ root_in, "attn.b_q": dq.sum(0),
        "attn.W_k": dK2.T @ flat_in, "attn.b_k": dK2.sum(0),
        "attn.W_v": dV2.T @ flat_in, "attn.b_v": dV2.sum(0),
    }
    d_root = dq @ p["attn.W_q"]
    d_nbr = (dK2 @ p["attn.W_k"] + dV2 @ p["attn.W_v"]).reshape(nbr_in.shape)
    return grads, d_root, d_nbr


# -- link decoder ------------------------------------------------------------

def decoder_forward(h_u: np.ndarray, h_v: np.ndarray, p) -> tuple[np.ndarray, Tape]:
    x = np.concatenate([h_u, h_v], axis=1)
    z1 = x @ p["dec.W1"].T + p["dec.b1"]
    a1 = np.maximum(z1, 0.0)
    logit = a1 @ p["dec.w2"] + p["dec.b2"][0]
    return logit, Tape("decoder", x=x, z1=z1, a1=a1, d_out=h_u.shape[1])


def decoder_backward(tape: Tape, grad: np.ndarray, p) -> tuple[dict, np.ndarray, np.ndarray]:
    """Returns ``(param_grads, d_h_u, d_h_v)``."""
    tape.expect("decoder")
    if grad.shape != (len(tape.x),):
        raise ShapeError(f"upstream grad {grad.shape} vs {len(tape.x)} logits")
    da1 = grad[:, None] * p["dec.w2"][None, :]
    dz1 = da1 * (tape.z1 > 0)
    dx = dz1 @ p["dec.W1"]
    grads = {
        "dec.W1": dz1.T @ tape.x, "dec.b1": dz1.sum(0),
        "dec.w2": tape.a1.T @ grad, "dec.b2": np.array([grad.sum()]),
    }
    d = tape.d_out
    return grads, dx[:, :d], dx[:, d:]


def decode_link(h_u, h_v, p) -> np.ndarray:
    return decoder_forward(np.atleast_2d(h_u), np.atleast_2d(h_v), p)[0]


# -- checkpoints -------------------------------------------------------------

_MAGIC = "TGPAR-CKPT 1"


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Text manifest (name + shape per line, then ``END``) followed by raw <f8 data."""
    d = params.dims
    lines = [_MAGIC,
             f"dims {d.num_nodes} {d.d_mem} {d.d_time} {d.d_edge} {d.d_static}"]
    for name, a in params.tensors.items():
        lines.append(" ".join([name] + [str(x) for x in a.shape]))
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for a in params.tensors.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    if buf.readline().decode("ascii").strip() != _MAGIC:
        raise ShapeError(f"{path}: not a checkpoint")
    dims_line = buf.readline().decode("ascii").split()
    dims = ModelDims(*[int(x) for x in dims_line[1:]])
    layout = []
    while True:
        line = buf.readline().decode("ascii").strip()
        if line == "END":
            break
        if not line:
            raise ShapeError(f"{path}: truncated manifest")
        name, *shape = line.split()
        layout.append((name, tuple(int(x) for x in shape)))
    off = buf.tell()
    tensors = {}
    for name, shape in layout:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(blob):
        raise ShapeError(f"{path}: {len(blob) - off} trailing bytes")
    return ModelParams(dims, tensors)


def finite_difference(f, x: np.ndarray, eps: float = 1e-5, idx: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in (range(flat.size) if idx is None else idx):
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * eps)
    return g
