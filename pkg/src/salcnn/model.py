"""SAL-CNN assembly: conv stack -> CBAM -> compression conv -> LSTM -> dense.

Each snapshot of a window ``(W, 11, 128)`` passes through the convolutional
part independently; the W flattened 1408-vectors form the LSTM sequence and
the last hidden state drives the regression head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import layers as L
from .dsp import ConfigurationError, NormStats
from .numerics import Array, DimensionError

MAGIC = b"SALC"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    """Base class for checkpoint loading failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, truncated file or malformed block."""


class CheckpointVersionError(CheckpointError):
    """File written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not match the architecture described by the stored config."""


@dataclass(frozen=True)
class ModelConfig:
    conv_depth: int = 2
    conv_channels: int = 5
    cbam_reduction: int = 2
    cbam_spatial_kernel: int = 3
    lstm_layers: int = 2
    lstm_hidden: int = 1408
    sequence_window: int = 5
    dropout: float = 0.1
    frames: int = 11
    bins: int = 128
    head_inputs: int | None = None
    # fixed multiplier on the dense output; labels are in percent of life
    output_scale: float = 100.0

    def __post_init__(self):
        for name in ("conv_depth", "conv_channels", "cbam_reduction", "lstm_layers",
                     "lstm_hidden", "sequence_window", "frames", "bins"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cbam_spatial_kernel < 1 or self.cbam_spatial_kernel % 2 == 0:
            raise ConfigurationError(f"cbam_spatial_kernel must be odd, got {self.cbam_spatial_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.output_scale > 0:
            raise ConfigurationError(f"output_scale must be positive, got {self.output_scale}")
        if self.head_inputs is not None and self.head_inputs != self.lstm_hidden:
            raise ConfigurationError(
                f"head input size {self.head_inputs} differs from LSTM hidden size {self.lstm_hidden}"
            )

    @property
    def lstm_input(self) -> int:
        return self.frames * self.bins

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    conv_blocks: list[L.ConvBlockParams]
    cbam: L.CbamParams
    compress_conv: L.ConvBlockParams
    lstm_layers: list[L.LstmParams]
    head: L.DenseParams
    norm_stats: NormStats | None = None

    def named_arrays(self) -> list[tuple[str, Array]]:
        """All learned arrays in declaration order, keyed by dotted path."""
        out = []
        for k, blk in enumerate(self.conv_blocks):
            out += [(f"conv_blocks.{k}.{n}", a) for n, a in blk.arrays()]
        out += [(f"cbam.{n}", a) for n, a in self.cbam.arrays()]
        out += [(f"compress_conv.{n}", a) for n, a in self.compress_conv.arrays()]
        for k, lp in enumerate(self.lstm_layers):
            out += [(f"lstm_layers.{k}.{n}", a) for n, a in lp.arrays()]
        out += [(f"head.{n}", a) for n, a in self.head.arrays()]
        return out

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    @property
    def dtype(self):
        return self.head.w.dtype

    def copy(self) -> "ModelParams":
        clone = build(self.config, seed=0, dtype=self.dtype)
        for (_, dst), (_, src) in zip(clone.named_arrays(), self.named_arrays()):
            dst[...] = src
        clone.norm_stats = self.norm_stats
        return clone


def build(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64) -> ModelParams:
    """Initialise parameters deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    c = cfg.conv_channels
    blocks = [L.init_conv_block(rng, 1, c, dtype=dtype)]
    blocks += [L.init_conv_block(rng, c, c, dtype=dtype) for _ in range(cfg.conv_depth - 1)]
    cbam = L.init_cbam(rng, c, cfg.cbam_reduction, cfg.cbam_spatial_kernel, dtype=dtype)
    compress = L.init_conv_block(rng, c, 1, dtype=dtype)
    lstms = [L.init_lstm(rng, cfg.lstm_input, cfg.lstm_hidden, dtype=dtype)]
    lstms += [L.init_lstm(rng, cfg.lstm_hidden, cfg.lstm_hidden, dtype=dtype) for _ in range(cfg.lstm_layers - 1)]
    head = L.init_dense(rng, cfg.lstm_hidden, dtype=dtype)
    return ModelParams(cfg, blocks, cbam, compress, lstms, head)


# --------------------------------------------------------------------------
# forward / backward


def _as_windows(params: ModelParams, windows) -> tuple[Array, bool]:
    cfg = params.config
    x = np.asarray(windows, dtype=params.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[2:] != (cfg.frames, cfg.bins) or x.shape[1] < 1:
        raise DimensionError(
            f"expected window of shape (W, {cfg.frames}, {cfg.bins}) or a batch of them, got {np.shape(windows)}"
        )
    return x, single


def forward_cached(params: ModelParams, windows, training: bool = False, rng=None, dropout=None):
    """Forward pass keeping everything backward needs.

    Returns ``(pred, cache)`` where ``pred`` has shape ``(B,)``. ``dropout``
    overrides the configured rate.
    """
    x, _ = _as_windows(params, windows)
    cfg = params.config
    b, w = x.shape[:2]
    fmap = x.reshape(b * w, 1, cfg.frames, cfg.bins)
    conv_caches = []
    for blk in params.conv_blocks:
        fmap, cc = L.conv_block_fwd(fmap, blk)
        conv_caches.append(cc)
    fmap, cbam_cache = L.cbam_fwd(fmap, params.cbam)
    fmap, comp_cache = L.conv_block_fwd(fmap, params.compress_conv)
    assert fmap.shape == (b * w, 1, cfg.frames, cfg.bins)
    seq = fmap.reshape(b, w, cfg.lstm_input)
    hs, lstm_caches = L.lstm_sequence_fwd(seq, params.lstm_layers)
    last = hs[:, -1, :]
    rate = cfg.dropout if dropout is None else dropout
    if training and rate > 0.0:
        if rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        mask = L.dropout_mask(last.shape, rate, rng, dtype=last.dtype)
    else:
        mask = None
    feat = last * mask if mask is not None else last
    pred = L.dense(feat, params.head)[:, 0] * params.config.output_scale
    cache = dict(
        shape=(b, w), conv=conv_caches, cbam=cbam_cache, comp=comp_cache,
        lstm=lstm_caches, hs_shape=hs.shape, mask=mask, feat=feat,
    )
    return pred, cache


def forward(params: ModelParams, windows, training: bool = False, seed=None):
    """Predicted RUL for one window ``(W, 11, 128)`` (a float) or a batch (an array)."""
    _, single = _as_windows(params, windows)
    rng = np.random.default_rng(seed) if training else None
    pred, _ = forward_cached(params, windows, training=training, rng=rng)
    return float(pred[0]) if single else pred


def backward(params: ModelParams, cache, grad_pred: Array) -> dict[str, Array]:
    """Gradients of ``sum(grad_pred * pred)`` for every named parameter."""
    cfg = params.config
    b, w = cache["shape"]
    grads: dict[str, Array] = {}
    g_feat, gh = L.dense_backward(grad_pred.reshape(b, 1) * params.config.output_scale, cache["feat"], params.head)
    if cache["mask"] is not None:
        g_feat = g_feat * cache["mask"]
    g_hs = np.zeros(cache["hs_shape"], dtype=g_feat.dtype)
    g_hs[:, -1, :] = g_feat
    g_seq, lstm_grads = L.lstm_sequence_backward(g_hs, cache["lstm"], params.lstm_layers)
    g_map = g_seq.reshape(b * w, 1, cfg.frames, cfg.bins)
    g_map, comp_grads = L.conv_block_backward(g_map, cache["comp"], params.compress_conv)
    g_map, cbam_grads = L.cbam_backward(g_map, cache["cbam"], params.cbam)
    conv_grads = []
    for k in range(len(params.conv_blocks) - 1, -1, -1):
        g_map, cg = L.conv_block_backward(g_map, cache["conv"][k], params.conv_blocks[k], need_input_grad=k > 0)
        conv_grads.append(cg)
    conv_grads.reverse()

    for k, cg in enumerate(conv_grads):
        for n, a in cg.items():
            grads[f"conv_blocks.{k}.{n}"] = a
    for n, a in cbam_grads.items():
        grads[f"cbam.{n}"] = a
    for n, a in comp_grads.items():
        grads[f"compress_conv.{n}"] = a
    for k, lg in enumerate(lstm_grads):
        for n, a in lg.items():
            grads[f"lstm_layers.{k}.{n}"] = a
    for n, a in gh.items():
        grads[f"head.{n}"] = a
    return grads


@dataclass
class AttentionMaps:
    prediction: float
    mc: Array  # (W, C)
    ms: Array  # (W, frames, bins)


def capture_attention(params: ModelParams, window) -> AttentionMaps:
    """Forward one window at inference and keep the CBAM maps of each snapshot."""
    x, single = _as_windows(params, window)
    if not single:
        raise DimensionError("capture_attention takes a single window (W, frames, bins)")
    pred, cache = forward_cached(params, x, training=False)
    _, mc, _, ms, _, _ = cache["cbam"]
    return AttentionMaps(prediction=float(pred[0]), mc=mc[:, :, 0, 0].copy(), ms=ms[:, 0].copy())


# --------------------------------------------------------------------------
# checkpoints


def save(params: ModelParams, path) -> None:
    """Little-endian binary checkpoint: header, config, stats, tensors."""
    cfg_blob = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(cfg_blob)) + cfg_blob
    if params.norm_stats is None:
        out += struct.pack("<Bdd", 0, 0.0, 0.0)
    else:
        out += struct.pack("<Bdd", 1, params.norm_stats.min, params.norm_stats.max)
    arrays = params.named_arrays()
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_CODES[le.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(le).tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a SAL-CNN checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigurationError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable config block ({exc})") from exc
    has_stats, lo, hi = r.unpack("<Bdd")
    (count,) = r.unpack("<I")
    stored = {}
    dtype = None
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code} for {name}")
        dt = _CODE_DTYPES[code]
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) * dt.itemsize
        stored[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape)
        dtype = dt
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    params = build(cfg, seed=0, dtype=dtype.newbyteorder("=") if dtype is not None else np.float64)
    expected = params.named_arrays()
    if [k for k, _ in expected] != list(stored):
        raise CheckpointShapeError(f"{path}: parameter names do not match the stored config")
    for name, arr in expected:
        src = stored[name]
        if src.shape != arr.shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {src.shape}, config implies {arr.shape}")
        arr[...] = src
    params.norm_stats = NormStats(lo, hi) if has_stats else None
    return params
