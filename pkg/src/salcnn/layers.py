"""Learned building blocks: conv blocks, CBAM attention and the LSTM.

All functions work on a leading batch axis as well as single samples.
Forward functions that have a backward counterpart return ``(out, cache)``
from their ``*_fwd`` variant; the public name returns just the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Array, DimensionError


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvBlockParams:
    kernels: Array  # (C_out, C_in, 3, 3)
    bias: Array  # (C_out,)
    activation: str = "relu"

    def arrays(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


@dataclass
class CbamParams:
    mlp_w1: Array  # (hidden, C)
    mlp_b1: Array  # (hidden,)
    mlp_w2: Array  # (C, hidden)
    mlp_b2: Array  # (C,)
    spatial_kernel: Array  # (1, 2, k, k)

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    def arrays(self):
        return [
            ("mlp_w1", self.mlp_w1),
            ("mlp_b1", self.mlp_b1),
            ("mlp_w2", self.mlp_w2),
            ("mlp_b2", self.mlp_b2),
            ("spatial_kernel", self.spatial_kernel),
        ]


GATES = ("f", "i", "c", "o")


@dataclass
class LstmParams:
    """Gate weights stacked as ``[W_f; W_i; W_c; W_o]`` acting on ``[h, x]``."""

    weights: Array  # (4H, H + D)
    bias: Array  # (4H,)

    @property
    def hidden(self) -> int:
        return self.weights.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.weights.shape[1] - self.hidden

    def gate(self, name: str) -> tuple[Array, Array]:
        k = GATES.index(name)
        h = self.hidden
        return self.weights[k * h : (k + 1) * h], self.bias[k * h : (k + 1) * h]

    w_f = property(lambda self: self.gate("f")[0])
    w_i = property(lambda self: self.gate("i")[0])
    w_c = property(lambda self: self.gate("c")[0])
    w_o = property(lambda self: self.gate("o")[0])
    b_f = property(lambda self: self.gate("f")[1])
    b_i = property(lambda self: self.gate("i")[1])
    b_c = property(lambda self: self.gate("c")[1])
    b_o = property(lambda self: self.gate("o")[1])

    @classmethod
    def from_gates(cls, w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o) -> "LstmParams":
        shapes = {w.shape for w in (w_f, w_i, w_c, w_o)}
        if len(shapes) != 1:
            raise DimensionError(f"gate matrices disagree in shape: {sorted(shapes)}")
        return cls(np.concatenate([w_f, w_i, w_c, w_o]), np.concatenate([b_f, b_i, b_c, b_o]))

    def arrays(self):
        return [("weights", self.weights), ("bias", self.bias)]


@dataclass
class LstmState:
    h: Array
    c: Array

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float64) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass
class DenseParams:
    w: Array  # (1, H)
    b: Array  # (1,)

    def arrays(self):
        return [("w", self.w), ("b", self.b)]


# --------------------------------------------------------------------------
# initialisation


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv_block(rng, c_in: int, c_out: int, k: int = 3, dtype=np.float64) -> ConvBlockParams:
    fan_in = c_in * k * k
    return ConvBlockParams(
        _uniform(rng, (c_out, c_in, k, k), fan_in, dtype), np.zeros(c_out, dtype=dtype)
    )


def cbam_hidden_width(channels: int, reduction: int = 2) -> int:
    return max(channels // reduction, 1)


def init_cbam(rng, channels: int, reduction: int = 2, spatial_k: int = 3, dtype=np.float64) -> CbamParams:
    if spatial_k % 2 == 0:
        raise ValueError(f"spatial kernel size must be odd, got {spatial_k}")
    hid = cbam_hidden_width(channels, reduction)
    return CbamParams(
        mlp_w1=_uniform(rng, (hid, channels), channels, dtype),
        mlp_b1=np.zeros(hid, dtype=dtype),
        mlp_w2=_uniform(rng, (channels, hid), hid, dtype),
        mlp_b2=np.zeros(channels, dtype=dtype),
        spatial_kernel=_uniform(rng, (1, 2, spatial_k, spatial_k), 2 * spatial_k * spatial_k, dtype),
    )


def init_lstm(rng, input_size: int, hidden: int, forget_bias: float = 1.0, dtype=np.float64) -> LstmParams:
    fan_in = hidden + input_size
    w = _uniform(rng, (4 * hidden, fan_in), fan_in, dtype)
    b = np.zeros(4 * hidden, dtype=dtype)
    b[:hidden] = forget_bias
    return LstmParams(w, b)


def init_dense(rng, inputs: int, dtype=np.float64) -> DenseParams:
    return DenseParams(_uniform(rng, (1, inputs), inputs, dtype), np.zeros(1, dtype=dtype))


# --------------------------------------------------------------------------
# conv block


def conv_block_fwd(x: Array, p: ConvBlockParams):
    if p.activation != "relu":
        raise ValueError(f"unsupported activation {p.activation!r}")
    pad = p.kernels.shape[-1] // 2
    out = nx.relu(nx.conv2d(x, p.kernels, p.bias, padding=pad, stride=1))
    return out, (x, out)


def conv_block_forward(x: Array, p: ConvBlockParams) -> Array:
    return conv_block_fwd(x, p)[0]


def conv_block_backward(grad_out: Array, cache, p: ConvBlockParams, need_input_grad: bool = True):
    """Returns ``(grad_x, {"kernels": ..., "bias": ...})``."""
    x, out = cache
    g = nx.relu_backward(grad_out, out)
    pad = p.kernels.shape[-1] // 2
    gx, gk, gb = nx.conv2d_backward(g, x, p.kernels, padding=pad, stride=1, need_input_grad=need_input_grad)
    return gx, {"kernels": gk, "bias": gb}


# --------------------------------------------------------------------------
# CBAM


def _mlp_fwd(v: Array, p: CbamParams):
    z1 = v @ p.mlp_w1.T + p.mlp_b1
    r = nx.relu(z1)
    return r @ p.mlp_w2.T + p.mlp_b2, (v, r)


def _mlp_bwd(dz2: Array, cache, p: CbamParams, grads: dict) -> Array:
    v, r = cache
    dz2_2d = dz2.reshape(-1, dz2.shape[-1])
    grads["mlp_w2"] += dz2_2d.T @ r.reshape(-1, r.shape[-1])
    grads["mlp_b2"] += dz2_2d.sum(axis=0)
    dz1 = nx.relu_backward(dz2 @ p.mlp_w2, r)
    dz1_2d = dz1.reshape(-1, dz1.shape[-1])
    grads["mlp_w1"] += dz1_2d.T @ v.reshape(-1, v.shape[-1])
    grads["mlp_b1"] += dz1_2d.sum(axis=0)
    return dz1 @ p.mlp_w1


def _check_cbam_input(f: Array, p: CbamParams):
    if f.ndim not in (3, 4):
        raise DimensionError(f"CBAM input must be (C,H,W) or (N,C,H,W), got {f.shape}")
    if f.shape[-3] != p.channels:
        raise DimensionError(f"axis C: CBAM expects {p.channels} channels, input has {f.shape[-3]}")


def cbam_channel_fwd(f: Array, p: CbamParams):
    _check_cbam_input(f, p)
    avg = nx.pool_channel(f, "avg")[..., 0, 0]
    mx = nx.pool_channel(f, "max")[..., 0, 0]
    za, ca = _mlp_fwd(avg, p)
    zm, cm = _mlp_fwd(mx, p)
    mc = nx.sigmoid(za + zm)[..., None, None]
    return mc, (f, ca, cm, mc)


def cbam_channel_attention(f: Array, p: CbamParams) -> Array:
    """Channel attention map ``(…, C, 1, 1)``: sigmoid of the shared MLP on avg- and max-pooled maps."""
    return cbam_channel_fwd(f, p)[0]


def cbam_channel_backward(grad_mc: Array, cache, p: CbamParams, grads: dict) -> Array:
    f, ca, cm, mc = cache
    dz = nx.sigmoid_backward(grad_mc, mc)[..., 0, 0]
    dv_avg = _mlp_bwd(dz, ca, p, grads)
    dv_max = _mlp_bwd(dz, cm, p, grads)
    return nx.pool_channel_backward(dv_avg[..., None, None], f, "avg") + nx.pool_channel_backward(
        dv_max[..., None, None], f, "max"
    )


def cbam_spatial_fwd(f1: Array, p: CbamParams):
    if p.spatial_kernel.shape[:2] != (1, 2):
        raise DimensionError(f"spatial kernel must be (1,2,k,k), got {p.spatial_kernel.shape}")
    desc = np.concatenate([nx.pool_spatial(f1, "avg"), nx.pool_spatial(f1, "max")], axis=-3)
    k = p.spatial_kernel.shape[-1]
    zero_bias = np.zeros(1, dtype=p.spatial_kernel.dtype)
    ms = nx.sigmoid(nx.conv2d(desc, p.spatial_kernel, zero_bias, padding=k // 2))
    return ms, (f1, desc, ms)


def cbam_spatial_attention(f1: Array, p: CbamParams) -> Array:
    """Spatial attention map ``(…, 1, H, W)`` from channel-pooled descriptors."""
    return cbam_spatial_fwd(f1, p)[0]


def cbam_spatial_backward(grad_ms: Array, cache, p: CbamParams, grads: dict) -> Array:
    f1, desc, ms = cache
    k = p.spatial_kernel.shape[-1]
    dpre = nx.sigmoid_backward(grad_ms, ms)
    ddesc, dk, _ = nx.conv2d_backward(dpre, desc, p.spatial_kernel, padding=k // 2)
    grads["spatial_kernel"] += dk
    return nx.pool_spatial_backward(ddesc[..., 0:1, :, :], f1, "avg") + nx.pool_spatial_backward(
        ddesc[..., 1:2, :, :], f1, "max"
    )


def cbam_fwd(f: Array, p: CbamParams):
    mc, ccache = cbam_channel_fwd(f, p)
    f1 = mc * f
    ms, scache = cbam_spatial_fwd(f1, p)
    f2 = ms * f1
    return f2, (f, mc, f1, ms, ccache, scache)


def cbam_apply(f: Array, p: CbamParams) -> Array:
    return cbam_fwd(f, p)[0]


def cbam_backward(grad_out: Array, cache, p: CbamParams):
    """Returns ``(grad_F, grads)`` with one entry per CBAM parameter."""
    f, mc, f1, ms, ccache, scache = cache
    grads = {name: np.zeros_like(arr) for name, arr in p.arrays()}
    d_ms = (grad_out * f1).sum(axis=-3, keepdims=True)
    d_f1 = grad_out * ms + cbam_spatial_backward(d_ms, scache, p, grads)
    d_mc = (d_f1 * f).sum(axis=(-2, -1), keepdims=True)
    d_f = d_f1 * mc + cbam_channel_backward(d_mc, ccache, p, grads)
    return d_f, grads


# --------------------------------------------------------------------------
# LSTM


def lstm_cell_fwd(x_t: Array, prev: LstmState, p: LstmParams):
    hid, d = p.hidden, p.input_size
    if x_t.shape[-1] != d:
        raise DimensionError(f"input gate: x_t has size {x_t.shape[-1]}, weights expect {d}")
    if prev.h.shape[-1] != hid or prev.c.shape[-1] != hid:
        raise DimensionError(f"forget gate: state size {prev.h.shape[-1]} does not match hidden {hid}")
    z = np.concatenate([prev.h, x_t], axis=-1)
    pre = z @ p.weights.T + p.bias
    f = nx.sigmoid(pre[..., :hid])
    i = nx.sigmoid(pre[..., hid : 2 * hid])
    c_tilde = nx.tanh(pre[..., 2 * hid : 3 * hid])
    o = nx.sigmoid(pre[..., 3 * hid :])
    c = f * prev.c + i * c_tilde
    tc = nx.tanh(c)
    h = o * tc
    return LstmState(h, c), (z, prev.c, f, i, c_tilde, o, tc)


def lstm_cell(x_t: Array, prev: LstmState, p: LstmParams) -> LstmState:
    return lstm_cell_fwd(x_t, prev, p)[0]


def lstm_cell_backward(dh: Array, dc: Array, cache, p: LstmParams):
    """One step of backprop through time.

    Returns ``(dx_t, dh_prev, dc_prev, dW, db)``.
    """
    z, c_prev, f, i, c_tilde, o, tc = cache
    hid = p.hidden
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    df = dc * c_prev
    di = dc * c_tilde
    dct = dc * i
    dpre = np.concatenate(
        [
            nx.sigmoid_backward(df, f),
            nx.sigmoid_backward(di, i),
            nx.tanh_backward(dct, c_tilde),
            nx.sigmoid_backward(do, o),
        ],
        axis=-1,
    )
    dpre2 = dpre.reshape(-1, 4 * hid)
    dW = dpre2.T @ z.reshape(-1, z.shape[-1])
    db = dpre2.sum(axis=0)
    dz = dpre @ p.weights
    return dz[..., hid:], dz[..., :hid], dc * f, dW, db


def lstm_sequence_fwd(xs: Array, layers: list[LstmParams]):
    """Run stacked LSTMs over ``xs`` of shape ``(T, D)`` or ``(N, T, D)`` from zero state."""
    if xs.shape[-2] < 1:
        raise ValueError("lstm_sequence needs at least one time step")
    if not layers:
        raise ValueError("lstm_sequence needs at least one layer")
    seq = xs
    caches = []
    for p in layers:
        batch = None if seq.ndim == 2 else seq.shape[0]
        state = LstmState.zeros(p.hidden, batch, dtype=seq.dtype)
        outs, steps = [], []
        for t in range(seq.shape[-2]):
            state, cache = lstm_cell_fwd(seq[..., t, :], state, p)
            outs.append(state.h)
            steps.append(cache)
        seq = np.stack(outs, axis=-2)
        caches.append(steps)
    return seq, caches


def lstm_sequence(xs: Array, layers: list[LstmParams]) -> Array:
    return lstm_sequence_fwd(xs, layers)[0]


def lstm_sequence_backward(grad_hs: Array, caches, layers: list[LstmParams]):
    """Backprop through time and layers.

    ``grad_hs`` is the gradient w.r.t. the top layer's hidden sequence.
    Returns ``(grad_xs, [{"weights": dW, "bias": db}, ...])``.
    """
    grads = [None] * len(layers)
    g_seq = grad_hs
    for li in range(len(layers) - 1, -1, -1):
        p, steps = layers[li], caches[li]
        dW = np.zeros_like(p.weights)
        db = np.zeros_like(p.bias)
        dh_next = np.zeros_like(g_seq[..., 0, :])
        dc_next = np.zeros_like(dh_next)
        dxs = [None] * len(steps)
        for t in range(len(steps) - 1, -1, -1):
            dx, dh_next, dc_next, gw, gb = lstm_cell_backward(g_seq[..., t, :] + dh_next, dc_next, steps[t], p)
            dW += gw
            db += gb
            dxs[t] = dx
        grads[li] = {"weights": dW, "bias": db}
        g_seq = np.stack(dxs, axis=-2)
    return g_seq, grads


# --------------------------------------------------------------------------
# dense head and dropout


def dense(x: Array, p: DenseParams) -> Array:
    if x.shape[-1] != p.w.shape[1]:
        raise DimensionError(f"dense expects {p.w.shape[1]} features, got {x.shape[-1]}")
    return x @ p.w.T + p.b


def dense_backward(grad_out: Array, x: Array, p: DenseParams):
    g2 = grad_out.reshape(-1, 1)
    x2 = x.reshape(-1, x.shape[-1])
    return grad_out @ p.w, {"w": g2.T @ x2, "b": g2.sum(axis=0)}


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float64) -> Array:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x: Array, rate: float, training: bool, rng_seed=None) -> Array:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return x * dropout_mask(x.shape, rate, rng, dtype=x.dtype)
