"""Stacked LSTM and GRU sequence regressors in NumPy.

Forward passes run over ``(batch, time, features)`` arrays and produce one
scalar output per step from the top layer's hidden state. Gradients are
exact backpropagation through time over the cached segment; training uses
truncated BPTT with the hidden state carried between segments of an epoch.

Gate layout per layer: ``Wx`` is ``(in, G*m)``, ``Wh`` is ``(m, G*m)`` and
``b`` is ``(G*m,)`` with blocks ``[input, forget, output, candidate]`` for
LSTM (G=4) and ``[update, reset, candidate]`` for GRU (G=3).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .errors import DataError, ModelFileError, NumericalError
from .history import EarlyStopping, TrainHistory

log = logging.getLogger(__name__)

FORMAT = "cryptocorr.rnn"
VERSION = 1


class Cell(str, enum.Enum):
    LSTM = "lstm"
    GRU = "gru"

    @property
    def gates(self) -> int:
        return 4 if self is Cell.LSTM else 3


@dataclass(frozen=True)
class RnnConfig:
    cell: Cell = Cell.LSTM
    depth: int = 2
    width: int = 32
    input_dim: int = 1
    bptt_window: int = 64
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cell", Cell(self.cell))
        if self.depth < 1 or self.width < 1 or self.input_dim < 1:
            raise ValueError("depth, width and input_dim must be >= 1")
        if self.bptt_window < 2:
            raise ValueError("bptt_window must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cell"] = self.cell.value
        return d


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def param_shapes(config: RnnConfig) -> dict[str, tuple[int, ...]]:
    g, m = config.cell.gates, config.width
    shapes = {}
    for layer in range(config.depth):
        fan_in = config.input_dim if layer == 0 else m
        shapes[f"l{layer}.Wx"] = (fan_in, g * m)
        shapes[f"l{layer}.Wh"] = (m, g * m)
        shapes[f"l{layer}.b"] = (g * m,)
    shapes["out.w"] = (m,)
    shapes["out.b"] = ()
    return shapes


@dataclass
class RnnModel:
    config: RnnConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config")
        for name, shape in expected.items():
            if np.shape(self.params[name]) != shape:
                raise ValueError(f"{name}: shape {np.shape(self.params[name])}, expected {shape}")

    @classmethod
    def initialize(cls, config: RnnConfig) -> "RnnModel":
        """Weights uniform in +-1/sqrt(fan_in) from ``config.seed``; biases zero."""
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: RnnConfig) -> "RnnModel":
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    def copy(self) -> "RnnModel":
        return RnnModel(self.config, {k: np.array(v, copy=True) for k, v in self.params.items()})

    def predict(self, sequence, warmup=None) -> np.ndarray:
        return rnn_predict(self, sequence, warmup)

    def to_dict(self) -> dict:
        return {"format": FORMAT, "version": VERSION, "config": self.config.to_dict(),
                "params": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "RnnModel":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ModelFileError(f"not a {FORMAT} v{VERSION} model")
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(RnnConfig(**d["config"]), params)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RnnModel":
        if not os.path.exists(path):
            raise ModelFileError(f"model file not found: {path}")
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ForwardCache:
    cell: Cell
    inputs: np.ndarray
    steps: list[list[tuple]]
    top_hidden: np.ndarray
    final_state: list


def zero_state(config: RnnConfig, batch: int) -> list:
    m = config.width
    if config.cell is Cell.LSTM:
        return [(np.zeros((batch, m)), np.zeros((batch, m))) for _ in range(config.depth)]
    return [np.zeros((batch, m)) for _ in range(config.depth)]


def _as_batch(sequence, input_dim: int) -> np.ndarray:
    x = np.asarray(sequence, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != input_dim:
        raise ValueError(f"expected (batch, time, {input_dim}) input, got {np.shape(sequence)}")
    if x.shape[1] == 0:
        raise DataError("empty sequence")
    return x


def _check_state(config: RnnConfig, state, batch: int) -> list:
    if state is None:
        return zero_state(config, batch)
    if len(state) != config.depth:
        raise ValueError(f"state has {len(state)} layers, model has {config.depth}")
    shape = (batch, config.width)
    for s in state:
        parts = s if config.cell is Cell.LSTM else (s,)
        if any(np.shape(p) != shape for p in parts):
            raise ValueError(f"state shape does not match {shape}")
    return list(state)


def rnn_forward(model: RnnModel, sequence, initial_state=None,
                keep_cache: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Run the stacked recurrence; returns outputs of shape ``(batch, time)`` and a cache.

    A 2-d ``sequence`` is treated as a batch of one (outputs are still 2-d).
    ``cache.final_state`` holds the last hidden (and cell) states.
    """
    cfg = model.config
    p = model.params
    x = _as_batch(sequence, cfg.input_dim)
    batch, steps, _ = x.shape
    m = cfg.width
    state = _check_state(cfg, initial_state, batch)
    lstm = cfg.cell is Cell.LSTM

    step_caches: list[list[tuple]] = []
    top = np.empty((batch, steps, m))
    for t in range(steps):
        u = x[:, t]
        layer_caches = []
        for layer in range(cfg.depth):
            wx, wh, b = p[f"l{layer}.Wx"], p[f"l{layer}.Wh"], p[f"l{layer}.b"]
            if lstm:
                h_prev, c_prev = state[layer]
                a = u @ wx + h_prev @ wh + b
                ifo = _sigmoid(a[:, :3 * m])
                i, f, o = ifo[:, :m], ifo[:, m:2 * m], ifo[:, 2 * m:]
                g = np.tanh(a[:, 3 * m:])
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                state[layer] = (h, c)
                if keep_cache:
                    layer_caches.append((u, h_prev, c_prev, i, f, o, g, tc))
            else:
                h_prev = state[layer]
                ax = u @ wx + b
                zr = _sigmoid(ax[:, :2 * m] + h_prev @ wh[:, :2 * m])
                z, r = zr[:, :m], zr[:, m:]
                rh = r * h_prev
                n = np.tanh(ax[:, 2 * m:] + rh @ wh[:, 2 * m:])
                h = (1.0 - z) * h_prev + z * n
                state[layer] = h
                if keep_cache:
                    layer_caches.append((u, h_prev, z, r, rh, n))
            u = h
        top[:, t] = u
        if keep_cache:
            step_caches.append(layer_caches)

    out = top @ p["out.w"] + p["out.b"]
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out), axis=0)))
        raise NumericalError(f"non-finite activation at step {bad}")
    return out, ForwardCache(cfg.cell, x, step_caches, top, state)


def rnn_backward(model: RnnModel, cache: ForwardCache, output_gradients) -> dict[str, np.ndarray]:
    """Exact parameter gradients given dLoss/dOutput of shape ``(batch, time)``.

    Gradients do not flow into the initial state (truncated BPTT).
    """
    cfg = model.config
    p = model.params
    if cache.cell is not cfg.cell or not cache.steps:
        raise ValueError("cache does not come from a matching forward pass with keep_cache=True")
    dy = np.asarray(output_gradients, dtype=float)
    batch, steps = cache.top_hidden.shape[:2]
    if dy.ndim == 1:
        dy = dy[None]
    if dy.shape != (batch, steps):
        raise ValueError(f"output gradients shape {dy.shape}, expected {(batch, steps)}")
    if len(cache.steps[0]) != cfg.depth or cache.top_hidden.shape[2] != cfg.width:
        raise ValueError("cache does not match the model configuration")
    m = cfg.width
    lstm = cfg.cell is Cell.LSTM

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["out.w"] = np.einsum("bt,btm->m", dy, cache.top_hidden)
    grads["out.b"] = np.array(dy.sum())
    dh_next = [np.zeros((batch, m)) for _ in range(cfg.depth)]
    dc_next = [np.zeros((batch, m)) for _ in range(cfg.depth)] if lstm else None

    for t in range(steps - 1, -1, -1):
        dh_above = dy[:, t, None] * p["out.w"]
        for layer in range(cfg.depth - 1, -1, -1):
            wx, wh = p[f"l{layer}.Wx"], p[f"l{layer}.Wh"]
            dh = dh_above + dh_next[layer]
            if lstm:
                u, h_prev, c_prev, i, f, o, g, tc = cache.steps[t][layer]
                do = dh * tc
                dc = dc_next[layer] + dh * o * (1.0 - tc * tc)
                da = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                                     do * o * (1.0 - o), dc * i * (1.0 - g * g)], axis=1)
                dc_next[layer] = dc * f
                grads[f"l{layer}.Wh"] += h_prev.T @ da
                dh_next[layer] = da @ wh.T
            else:
                u, h_prev, z, r, rh, n = cache.steps[t][layer]
                dz = dh * (n - h_prev)
                dan = dh * z * (1.0 - n * n)
                drh = dan @ wh[:, 2 * m:].T
                daz = dz * z * (1.0 - z)
                dar = drh * h_prev * r * (1.0 - r)
                da = np.concatenate([daz, dar, dan], axis=1)
                gwh = grads[f"l{layer}.Wh"]
                gwh[:, :2 * m] += h_prev.T @ da[:, :2 * m]
                gwh[:, 2 * m:] += rh.T @ dan
                dh_next[layer] = (dh * (1.0 - z) + drh * r
                                  + da[:, :2 * m] @ wh[:, :2 * m].T)
            grads[f"l{layer}.Wx"] += u.T @ da
            grads[f"l{layer}.b"] += da.sum(axis=0)
            dh_above = da @ wx.T
    return grads


def mse_loss_and_grads(model: RnnModel, inputs, targets,
                       initial_state=None) -> tuple[float, dict[str, np.ndarray], list]:
    """MSE over every (sequence, step) output; returns (loss, grads, final state)."""
    out, cache = rnn_forward(model, inputs, initial_state)
    y = np.asarray(targets, dtype=float).reshape(out.shape)
    err = out - y
    loss = float(np.mean(err * err))
    grads = rnn_backward(model, cache, 2.0 * err / err.size)
    return loss, grads, cache.final_state


def rnn_predict(model: RnnModel, sequence, warmup=None) -> np.ndarray:
    """Outputs for a single ``(time, features)`` sequence, optionally after a warm-up segment."""
    state = None
    if warmup is not None and len(warmup):
        _, cache = rnn_forward(model, warmup, keep_cache=False)
        state = cache.final_state
    out, _ = rnn_forward(model, sequence, state, keep_cache=False)
    return out[0]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(w):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(w)}")
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = w - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, t=t, m=new_m, v=new_v)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def lr_range_test(model_factory: Callable[[], dict[str, np.ndarray]],
                  batches: Iterable, loss_and_grads: Callable,
                  start_rate: float = 1e-6, growth: float = 1.3,
                  divergence_factor: float = 4.0, optimizer: str = "adam",
                  trace: list | None = None) -> float:
    """Learning-rate range test.

    Trains fresh parameters from ``model_factory()`` on successive batches,
    multiplying the rate by ``growth`` after each one, until the loss exceeds
    ``divergence_factor`` times its running minimum or batches run out.
    Returns one decade below the rate that produced the minimum loss.
    ``loss_and_grads(params, batch)`` must return ``(loss, grads)``;
    ``optimizer`` is ``"adam"`` or ``"sgd"``. If ``trace`` is a list it
    receives the ``(rate, loss)`` pairs.
    """
    if start_rate <= 0 or growth <= 1:
        raise ValueError("need start_rate > 0 and growth > 1")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    params = model_factory()
    state = AdamState(learning_rate=start_rate)
    rate = start_rate
    rates, losses = [], []
    best = math.inf
    for batch in batches:
        loss, grads = loss_and_grads(params, batch)
        if not math.isfinite(loss) or loss > divergence_factor * best:
            if len(losses) <= 1:
                raise NumericalError(
                    f"loss diverged immediately at rate {start_rate:g}; use a smaller start_rate")
            break
        rates.append(rate)
        losses.append(loss)
        best = min(best, loss)
        if optimizer == "adam":
            state = replace(state, learning_rate=rate)
            params, state = adam_step(state, params, grads)
        else:
            params = {k: w - rate * grads[k] for k, w in params.items()}
        rate *= growth
    if trace is not None:
        trace.extend(zip(rates, losses))
    if not losses:
        raise DataError("no batches supplied")
    if len(losses) == 1:
        warnings.warn("range test saw a single batch; returning start_rate", RuntimeWarning)
        return start_rate
    return rates[int(np.argmin(losses))] / 10.0


def make_streams(features, targets, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut one long series into ``batch_size`` contiguous parallel streams.

    Trailing rows that do not fill every stream are dropped.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("features must be (T, D) and targets (T,)")
    streams = max(1, min(batch_size, x.shape[0] // 2))
    length = x.shape[0] // streams
    n = streams * length
    return (x[:n].reshape(streams, length, x.shape[1]), y[:n].reshape(streams, length))


def segments(length: int, window: int) -> list[slice]:
    return [slice(s, min(s + window, length)) for s in range(0, length, window)]


def rnn_lr_range_test(config: RnnConfig, train, start_rate: float = 1e-6,
                      growth: float = 1.3, max_batches: int = 200,
                      trace: list | None = None) -> float:
    """Range test for an RNN over repeated passes of the training segments."""
    xs, ys = make_streams(*train, config.batch_size)
    segs = segments(xs.shape[1], config.bptt_window)
    batches = [(xs[:, s], ys[:, s]) for s in segs]

    def cycle():
        for i in range(max_batches):
            yield batches[i % len(batches)]

    def loss_and_grads(params, batch):
        loss, grads, _ = mse_loss_and_grads(RnnModel(config, params), *batch)
        return loss, grads

    return lr_range_test(lambda: RnnModel.initialize(config).params, cycle(), loss_and_grads,
                         start_rate, growth, trace=trace)


def fit_rnn(config: RnnConfig, train, validation, learning_rate: float = 1e-3,
            max_epochs: int = 500, patience: int = 20,
            clip_norm: float | None = 5.0) -> tuple[RnnModel, TrainHistory]:
    """Train with Adam and truncated BPTT; returns the lowest-validation-loss epoch's model.

    ``train`` and ``validation`` are ``(features (T, D), targets (T,))``. Each
    epoch cuts the training series into ``batch_size`` parallel streams and
    walks them in ``bptt_window`` segments, carrying hidden state between
    segments. Validation MSE is computed on the full validation sequence from
    a zero state.
    """
    x, y = train
    xv, yv = (np.asarray(a, dtype=float) for a in validation)
    if len(y) == 0 or yv.size == 0:
        raise DataError("train and validation sets must be non-empty")
    if learning_rate <= 0 or max_epochs < 1:
        raise ValueError("need learning_rate > 0 and max_epochs >= 1")
    xs, ys = make_streams(x, y, config.batch_size)
    segs = segments(xs.shape[1], config.bptt_window)

    model = RnnModel.initialize(config)
    best = model.copy()
    opt = AdamState(learning_rate=learning_rate)
    history = TrainHistory()
    stopper = EarlyStopping(patience)
    for epoch in range(1, max_epochs + 1):
        state = None
        batch_losses = []
        for b, seg in enumerate(segs):
            try:
                loss, grads, state = mse_loss_and_grads(model, xs[:, seg], ys[:, seg], state)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            if clip_norm is not None:
                grads = clip_by_global_norm(grads, clip_norm)
            params, opt = adam_step(opt, model.params, grads)
            model = RnnModel(config, params)
            batch_losses.append(loss)
        pred = rnn_predict(model, xv)
        val = float(np.mean((pred - yv) ** 2))
        history.record(epoch, float(np.mean(batch_losses)), val)
        stop = stopper.step(epoch, val)
        if stopper.best_iteration == epoch:
            best = model.copy()
        log.debug("%s epoch %d train %.6g val %.6g", config.cell.value, epoch,
                  history.train_loss[-1], val)
        if stop:
            break
    history.checkpoint_iteration = stopper.best_iteration
    return best, history
