"""L1/Adam training loop and leave-one-bearing-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .data import BearingRun, Sample, compute_norm_stats, spectrogram_stack, stack_samples, windows_from_stack
from .dsp import ConfigurationError, StftConfig
from .numerics import Array, DimensionError

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """NaN/Inf loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.1
    seed: int = 0
    precision: str = "f64"
    checked: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


# --------------------------------------------------------------------------
# loss and metric


def l1_loss(pred: Array, target: Array) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred shape {pred.shape} != target shape {target.shape}")
    return float(np.abs(pred - target).mean())


def l1_loss_backward(pred: Array, target: Array) -> Array:
    """Subgradient of the mean absolute error; zero at exact ties."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred shape {pred.shape} != target shape {target.shape}")
    return np.sign(pred - target) / pred.size


def mae(actual: Sequence[float], predicted: Sequence[float]) -> float:
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape:
        raise DimensionError(f"mae: {a.shape[0]} actual vs {p.shape[0]} predicted values")
    if a.size == 0:
        raise ValueError("mae of an empty series is undefined")
    return float(np.abs(a - p).mean())


def loss_and_grads(params: M.ModelParams, windows, targets, training=False, rng=None, dropout=None):
    pred, cache = M.forward_cached(params, windows, training=training, rng=rng, dropout=dropout)
    targets = np.asarray(targets, dtype=pred.dtype)
    loss = l1_loss(pred, targets)
    grads = M.backward(params, cache, l1_loss_backward(pred, targets))
    return loss, grads


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, Array]
    v: dict[str, Array]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: M.ModelParams) -> "AdamState":
        named = params.named_arrays()
        return cls({n: np.zeros_like(a) for n, a in named}, {n: np.zeros_like(a) for n, a in named})


def adam_step(params: M.ModelParams, grads: dict[str, Array], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if cfg.checked:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, theta in params.named_arrays():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: M.ModelParams
    loss_history: list[float]


def train(
    params: M.ModelParams,
    samples,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch L1/Adam training, in place on ``params``.

    ``samples`` is a list of :class:`Sample` or an ``(X, y)`` pair. Batches
    come from a seeded shuffle each epoch; the trailing partial batch is kept.
    """
    if isinstance(samples, tuple):
        x, y = samples
    else:
        if not samples:
            raise ValueError("cannot train on an empty dataset")
        x, y = stack_samples(samples)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    x = np.asarray(x, dtype=params.dtype)
    y = np.asarray(y, dtype=params.dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(params)
    history = []
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, x[idx], y[idx], training=True, rng=rng, dropout=cfg.dropout)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            adam_step(params, grads, state, cfg)
            total += loss * len(idx)
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])
        log.debug("epoch %d loss %.4f", epoch + 1, history[-1])
    return TrainResult(params, history)


def predict(params: M.ModelParams, x: Array, batch_size: int = 64) -> Array:
    x = np.asarray(x, dtype=params.dtype)
    out = [M.forward_cached(params, x[s : s + batch_size])[0] for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------
# leave-one-bearing-out evaluation


@dataclass
class BearingSeries:
    end_index: Array
    timestamp_s: Array
    actual: Array
    predicted: Array


@dataclass
class EvalReport:
    per_bearing: dict[str, float]
    series: dict[str, BearingSeries] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    loss_histories: dict[str, list[float]] = field(default_factory=dict)
    models: dict[str, M.ModelParams] = field(default_factory=dict)  # fold models, keyed by held-out bearing

    @property
    def mean_mae(self) -> float:
        vals = list(self.per_bearing.values())
        return float(sum(vals) / len(vals)) if vals else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("bearing,mae\n")
            for bid, v in self.per_bearing.items():
                fh.write(f"{bid},{v!r}\n")
            fh.write(f"mean,{self.mean_mae!r}\n")

    def series_to_csv(self, bearing_id: str, path) -> None:
        s = self.series[bearing_id]
        write_prediction_csv(path, s.timestamp_s, s.actual, s.predicted)


def write_prediction_csv(path, timestamps, actual, predicted) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("timestamp_s,actual_rul_pct,predicted_rul_pct\n")
        for t, a, p in zip(timestamps, actual, predicted):
            fh.write(f"{float(t)!r},{float(a)!r},{float(p)!r}\n")


Predictor = Callable[[list[Sample]], Array]
FitFn = Callable[[list[Sample], list[Sample]], Predictor]


def evaluate_loocv(
    runs: Sequence[BearingRun],
    cfg: TrainConfig = TrainConfig(),
    model_cfg: M.ModelConfig = M.ModelConfig(),
    stft_cfg: StftConfig = StftConfig(),
    stride: int = 1,
    fit: FitFn | None = None,
    on_fold: Callable[[str, float], None] | None = None,
) -> EvalReport:
    """Hold out each bearing in turn, train on the rest, report MAE in RUL percent.

    ``fit(train_samples, test_samples)`` may replace model training; it must
    return a predictor mapping samples to RUL percent.
    """
    if len(runs) < 2:
        raise ValueError(f"leave-one-bearing-out needs at least 2 bearings, got {len(runs)}")
    w = model_cfg.sequence_window
    stacks = {r.id: spectrogram_stack(r, stft_cfg, bins=model_cfg.bins) for r in runs}
    report = EvalReport(per_bearing={})
    for held in runs:
        if len(held) < w:
            log.warning("skipping %s: %d recordings < window %d", held.id, len(held), w)
            report.skipped.append(held.id)
            continue
        train_runs = [r for r in runs if r.id != held.id and len(r) >= w]
        if not train_runs:
            raise ValueError(f"no training bearings long enough for window {w} when holding out {held.id}")
        stats = compute_norm_stats(stacks[r.id] for r in train_runs)
        train_samples = [s for r in train_runs for s in windows_from_stack(stacks[r.id], w, stride, stats, r.id)]
        test_samples = windows_from_stack(stacks[held.id], w, 1, stats, held.id)
        if fit is not None:
            predictor = fit(train_samples, test_samples)
            preds = np.asarray(predictor(test_samples), dtype=np.float64)
        else:
            params = M.build(model_cfg, seed=cfg.seed, dtype=cfg.dtype)
            params.norm_stats = stats
            result = train(params, train_samples, cfg)
            report.loss_histories[held.id] = result.loss_history
            report.models[held.id] = params
            preds = predict(params, stack_samples(test_samples)[0]).astype(np.float64)
        actual = np.array([s.label_rul_pct for s in test_samples])
        ends = np.array([s.end_index for s in test_samples])
        report.per_bearing[held.id] = mae(actual, preds)
        report.series[held.id] = BearingSeries(
            ends, np.array([held.recordings[e].seconds for e in ends]), actual, preds
        )
        if on_fold is not None:
            on_fold(held.id, report.per_bearing[held.id])
    return report
