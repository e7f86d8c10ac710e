"""Dense array primitives with explicit forward/backward passes.

Arrays are plain ``numpy.ndarray`` values. Every differentiable primitive
comes as a ``foo`` / ``foo_backward`` pair; backward functions take the
upstream gradient plus whatever the forward pass needs and return the
gradients w.r.t. each differentiable argument.

Convolutions and pools accept either a single map ``(C, H, W)`` or a batch
``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


class NonDeterministicError(ValueError):
    """Raised by :func:`grad_check` when the probed function is not repeatable."""


def as_tensor(x, dtype=np.float64, checked: bool = True) -> Array:
    """Convert ``x`` to a contiguous array, rejecting NaN/Inf when ``checked``."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf values")
    return arr


class GradPair(NamedTuple):
    value: Array
    grad: Array


# --------------------------------------------------------------------------
# elementwise activations


def sigmoid(x: Array) -> Array:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: Array, out: Array) -> Array:
    return grad_out * out * (1.0 - out)


def tanh(x: Array) -> Array:
    return np.tanh(x)


def tanh_backward(grad_out: Array, out: Array) -> Array:
    return grad_out * (1.0 - out * out)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Array, out: Array) -> Array:
    return grad_out * (out > 0)


_ACTIVATIONS = {
    "sigmoid": (sigmoid, sigmoid_backward),
    "tanh": (tanh, tanh_backward),
    "relu": (relu, relu_backward),
}


def elementwise(op: str, x: Array) -> Array:
    """Apply ``sigmoid``, ``tanh`` or ``relu``."""
    try:
        fwd, _ = _ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fwd(x)


def elementwise_backward(op: str, grad_out: Array, out: Array) -> Array:
    """Backward of :func:`elementwise`, expressed through the forward output."""
    try:
        _, bwd = _ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return bwd(grad_out, out)


# --------------------------------------------------------------------------
# matmul


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimension mismatch: a has {a.shape[1]} columns, b has {b.shape[0]} rows"
        )
    return a @ b


def matmul_backward(grad_out: Array, a: Array, b: Array) -> tuple[Array, Array]:
    return grad_out @ b.T, a.T @ grad_out


# --------------------------------------------------------------------------
# convolution (cross-correlation, no kernel flip)


def _as_batch(x: Array, name: str) -> tuple[Array, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _conv_out_size(size: int, k: int, padding: int, stride: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"axis {axis}: size {size} with kernel {k}, padding {padding}, stride {stride} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _check_conv_args(x: Array, kernels: Array, bias: Array, padding: int, stride: int):
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be (C_out,C_in,kH,kW), got shape {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"axis C_in: input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"axis C_out: bias shape {bias.shape} does not match {c_out} kernels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"invalid padding={padding} / stride={stride}")
    h_out = _conv_out_size(x.shape[2], kh, padding, stride, "H")
    w_out = _conv_out_size(x.shape[3], kw, padding, stride, "W")
    return h_out, w_out


# elements per im2col block; sized to stay cache resident
_BLOCK = 196608
# columns per backward block
_BWD_CHUNK = 16384


def _tap_mm(a: Array, b: Array) -> Array:
    # BLAS is slow for a one-wide inner dimension; an outer product is not
    if a.shape[1] == 1:
        return a * b
    return a @ b


def _chunk_cols(rows: int) -> int:
    c = 1024
    while c * 2 * rows <= _BLOCK:
        c *= 2
    return c


def _flat_padded(xb: Array, padding: int, kh: int, kw: int) -> tuple[Array, int, int]:
    """Channel-major padded copy ``(C, rows)`` with a tail so every tap shift stays in bounds.

    Column ``n*Hp*Wp + h*Wp + w`` holds pixel ``(h, w)`` of image ``n``;
    shifting by ``i*Wp + j`` columns moves the whole batch by tap ``(i, j)``.
    """
    n, c, h, w = xb.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    tail = (kh - 1) * wp + (kw - 1)
    buf = np.zeros((c, n * hp * wp + tail), dtype=xb.dtype)
    view = buf[:, : n * hp * wp].reshape(c, n, hp, wp)
    view[:, :, padding : padding + h, padding : padding + w] = xb.transpose(1, 0, 2, 3)
    return buf, hp, wp


def conv2d(x: Array, kernels: Array, bias: Array, padding: int = 1, stride: int = 1) -> Array:
    """2-D cross-correlation of ``x`` with ``kernels`` plus per-channel ``bias``."""
    xb, single = _as_batch(x, "input")
    h_out, w_out = _check_conv_args(xb, kernels, bias, padding, stride)
    n = xb.shape[0]
    c_out, c_in, kh, kw = kernels.shape
    buf, hp, wp = _flat_padded(xb, padding, kh, kw)
    cols = n * hp * wp
    dtype = np.result_type(buf, kernels)
    # row (i*kw + j)*C_in + c of a column block is channel c shifted by tap (i, j)
    wmat = np.ascontiguousarray(kernels.transpose(0, 2, 3, 1).reshape(c_out, kh * kw * c_in), dtype=dtype)
    offs = [i * wp + j for i in range(kh) for j in range(kw)]
    chunk = _chunk_cols(len(offs) * c_in)
    col = np.empty((len(offs) * c_in, min(chunk, cols)), dtype=dtype)
    acc = np.empty((c_out, cols), dtype=dtype)
    for s0 in range(0, cols, chunk):
        e0 = min(s0 + chunk, cols)
        m = e0 - s0
        for t, off in enumerate(offs):
            col[t * c_in : (t + 1) * c_in, :m] = buf[:, s0 + off : e0 + off]
        np.matmul(wmat, col[:, :m], out=acc[:, s0:e0])
    full = acc.reshape(c_out, n, hp, wp)
    out = full[:, :, : stride * (h_out - 1) + 1 : stride, : stride * (w_out - 1) + 1 : stride]
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(
    grad_out: Array,
    saved_input: Array,
    kernels: Array,
    padding: int = 1,
    stride: int = 1,
    need_input_grad: bool = True,
) -> tuple[Array | None, Array, Array]:
    """Gradients of ``sum(grad_out * conv2d(x, K, b))`` w.r.t. ``x``, ``K`` and ``b``.

    With ``need_input_grad=False`` the input gradient is skipped and returned as ``None``.
    """
    xb, single = _as_batch(saved_input, "saved_input")
    gb, _ = _as_batch(grad_out, "grad_out")
    bias_stub = np.zeros(kernels.shape[0]) if kernels.ndim == 4 else np.zeros(0)
    h_out, w_out = _check_conv_args(xb, kernels, bias_stub, padding, stride)
    n = xb.shape[0]
    c_out, c_in, kh, kw = kernels.shape
    if gb.shape != (n, c_out, h_out, w_out):
        raise DimensionError(
            f"grad_out shape {gb.shape} does not match forward output {(n, c_out, h_out, w_out)}"
        )
    buf, hp, wp = _flat_padded(xb, padding, kh, kw)
    cols = n * hp * wp
    dtype = np.result_type(grad_out, kernels, saved_input)
    # scatter grad_out onto the padded grid; positions never produced stay zero
    g_full = np.zeros((c_out, n, hp, wp), dtype=dtype)
    g_full[:, :, : stride * (h_out - 1) + 1 : stride, : stride * (w_out - 1) + 1 : stride] = gb.transpose(1, 0, 2, 3)
    g_cols = g_full.reshape(c_out, cols)
    # at stride 1 the input gradient is a forward correlation with rotated kernels
    via_conv = stride == 1 and kh == kw and padding <= kh - 1
    scatter = need_input_grad and not via_conv
    taps_t = np.ascontiguousarray(kernels.transpose(2, 3, 1, 0), dtype=dtype)  # (kh, kw, C_in, C_out)
    grad_buf = np.zeros(buf.shape, dtype=dtype) if scatter else None
    grad_taps = np.zeros((kh, kw, c_out, c_in), dtype=dtype)
    # per-tap products beat im2col here: no column copies, and wider blocks pay off
    for s0 in range(0, cols, _BWD_CHUNK):
        e0 = min(s0 + _BWD_CHUNK, cols)
        g_blk = g_cols[:, s0:e0]
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                grad_taps[i, j] += g_blk @ buf[:, s0 + off : e0 + off].T
                if scatter:
                    grad_buf[:, s0 + off : e0 + off] += _tap_mm(taps_t[i, j], g_blk)
    grad_k = np.ascontiguousarray(grad_taps.transpose(2, 3, 0, 1))
    grad_b = gb.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_k, grad_b
    if via_conv:
        rot = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dtype=dtype)
        g_src = gb.astype(dtype, copy=False)
        gx = conv2d(g_src, rot, np.zeros(c_in, dtype=dtype), padding=kh - 1 - padding)
        return (gx[0] if single else gx), grad_k, grad_b
    gx = grad_buf[:, :cols].reshape(c_in, n, hp, wp)[:, :, padding : padding + xb.shape[2], padding : padding + xb.shape[3]]
    gx = gx.transpose(1, 0, 2, 3)
    return (gx[0] if single else gx), grad_k, grad_b


# --------------------------------------------------------------------------
# pooling


def pool_channel(x: Array, mode: str) -> Array:
    """Global per-channel pooling: ``(…, C, H, W) -> (…, C, 1, 1)``."""
    if x.ndim < 3:
        raise DimensionError(f"pool_channel expects (C,H,W) or (N,C,H,W), got {x.shape}")
    if mode == "avg":
        return x.mean(axis=(-2, -1), keepdims=True)
    if mode == "max":
        return x.max(axis=(-2, -1), keepdims=True)
    raise ValueError(f"unknown pool mode {mode!r}")


def pool_channel_backward(grad_out: Array, x: Array, mode: str) -> Array:
    if mode == "avg":
        hw = x.shape[-2] * x.shape[-1]
        return np.broadcast_to(grad_out / hw, x.shape).copy()
    if mode == "max":
        # route to the first maximal position only, matching a scan-order argmax
        flat = x.reshape(*x.shape[:-2], -1)
        idx = flat.argmax(axis=-1)
        g = np.zeros_like(flat)
        np.put_along_axis(g, idx[..., None], grad_out.reshape(*x.shape[:-2], 1), axis=-1)
        return g.reshape(x.shape)
    raise ValueError(f"unknown pool mode {mode!r}")


def pool_spatial(x: Array, mode: str) -> Array:
    """Per-position pooling across channels: ``(…, C, H, W) -> (…, 1, H, W)``."""
    if x.ndim < 3:
        raise DimensionError(f"pool_spatial expects (C,H,W) or (N,C,H,W), got {x.shape}")
    if mode == "avg":
        return x.mean(axis=-3, keepdims=True)
    if mode == "max":
        return x.max(axis=-3, keepdims=True)
    raise ValueError(f"unknown pool mode {mode!r}")


def pool_spatial_backward(grad_out: Array, x: Array, mode: str) -> Array:
    if mode == "avg":
        return np.broadcast_to(grad_out / x.shape[-3], x.shape).copy()
    if mode == "max":
        # first maximal channel wins; later ties are masked out as we go
        best = x.max(axis=-3)
        taken = np.zeros(best.shape, dtype=bool)
        g = np.empty_like(x)
        g0 = grad_out[..., 0, :, :]
        for c in range(x.shape[-3]):
            sel = x[..., c, :, :] == best
            sel &= ~taken
            np.multiply(g0, sel, out=g[..., c, :, :])
            taken |= sel
        return g
    raise ValueError(f"unknown pool mode {mode!r}")


# --------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_input: int
    worst_index: int
    checked: int


def grad_check(
    f: Callable[[Sequence[Array]], tuple[float, Sequence[Array]]],
    inputs: Sequence[Array],
    step: float | Sequence[float] = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
    max_entries: int | None = None,
    probe: Sequence[Sequence[int] | None] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``f``'s analytic gradients against central differences.

    ``f(inputs)`` must return ``(value, grads)`` with one gradient per input.
    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.

    ``max_entries`` caps how many scalars of each input are probed (chosen
    at random, always including the largest analytic gradient). ``probe``
    overrides the selection with explicit flat indices per input. ``step``
    may be one value per input, e.g. smaller ahead of ReLU or max kinks.
    """
    steps = [step] * len(inputs) if np.isscalar(step) else list(step)
    if len(steps) != len(inputs):
        raise ValueError(f"got {len(steps)} steps for {len(inputs)} inputs")
    for h in steps:
        if not 0 < h <= 1e-3:
            raise ValueError(f"step must lie in (0, 1e-3], got {h}")
    work = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    if not all(np.all(np.isfinite(x)) for x in work):
        raise ValueError("grad_check inputs must be finite")

    value, grads = f(work)
    value_again, _ = f(work)
    if value != value_again:
        raise NonDeterministicError(
            "function returned different values for identical inputs (is dropout enabled?)"
        )
    if len(grads) != len(work):
        raise DimensionError(f"expected {len(work)} gradients, got {len(grads)}")

    rng = np.random.default_rng(seed)
    worst = (0.0, 0, 0)
    count = 0
    for k, (x, g) in enumerate(zip(work, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise DimensionError(f"gradient {k} has shape {g.shape}, input has {x.shape}")
        flat_x = x.reshape(-1)
        flat_g = g.reshape(-1)
        if probe is not None and probe[k] is not None:
            indices = np.asarray(probe[k], dtype=np.int64)
        elif max_entries is not None and flat_x.size > max_entries:
            picked = rng.choice(flat_x.size, size=max_entries - 1, replace=False)
            indices = np.unique(np.append(picked, np.abs(flat_g).argmax()))
        else:
            indices = np.arange(flat_x.size)
        step = steps[k]
        for idx in indices:
            orig = flat_x[idx]
            flat_x[idx] = orig + step
            plus, _ = f(work)
            flat_x[idx] = orig - step
            minus, _ = f(work)
            flat_x[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            analytic = flat_g[idx]
            denom = max(abs(analytic), abs(numeric), floor)
            err = abs(analytic - numeric) / denom
            count += 1
            if err > worst[0]:
                worst = (err, k, int(idx))
    return GradCheckReport(
        max_rel_err=float(worst[0]),
        passed=bool(worst[0] < tol),
        worst_input=worst[1],
        worst_index=worst[2],
        checked=count,
    )
