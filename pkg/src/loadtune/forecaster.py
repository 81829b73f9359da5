"""Encoder-only transformer forecaster: model assembly, training, inference."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import nn_core as nn
from .data import write_npz
from .errors import (ConfigError, DimensionError, DivergenceError,
                     ForecastRangeError, NumericError, UsageError)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    lookback_steps: int = 3
    feature_count: int = 12
    td_dense_units: int = 64
    heads: int = 8
    head_dim: int = 64
    attn_dropout: float = 0.1
    dense_units: int = 64
    dense_layers: int = 2
    horizon: int = 24
    residual: bool = False

    def __post_init__(self):
        counts = ("lookback_steps", "feature_count", "td_dense_units", "heads",
                  "head_dim", "dense_units", "horizon")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dense_layers < 0:
            raise ConfigError("dense_layers must be >= 0")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("attn_dropout must lie in [0, 1)")

    @property
    def input_nodes(self) -> int:
        return self.lookback_steps * self.feature_count

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Down-scaled architecture for desk-scale tuning and tests."""
        base = dict(td_dense_units=16, heads=2, head_dim=8, dense_units=16)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int
    epochs: int
    learning_rate: float

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    epochs_run: int = 0

    def digest(self) -> str:
        payload = np.asarray(self.train_loss + self.val_loss, dtype=float).tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainReport":
        return cls(list(d["train_loss"]), list(d["val_loss"]),
                   float(d["wall_time"]), int(d["epochs_run"]))


class ForecastModel:
    """Time-distributed dense -> self-attention -> layer norm -> flatten ->
    ReLU dense stack -> linear horizon output.

    Parameters are exposed as a flat ``{"layer.field": array}`` mapping whose
    arrays are shared with the layer bundles, so in-place updates through
    :meth:`parameters` are seen by the forward pass.
    """

    def __init__(self, config: ModelConfig, td, attn, norm, hidden, out):
        self.config = config
        self.td = td
        self.attn = attn
        self.norm = norm
        self.hidden = list(hidden)
        self.out = out
        self.metadata: dict = {}
        self._cache = None
        # all parameters live in one buffer so a training step is a single axpy
        self.flat, views = nn.pack_flat(self.parameters())
        for lname, layer in self._layers():
            for k in layer.arrays():
                setattr(layer, k, views[f"{lname}.{k}"])

    def _layers(self):
        yield "td", self.td
        yield "attn", self.attn
        yield "norm", self.norm
        for i, h in enumerate(self.hidden):
            yield f"hidden{i}", h
        yield "out", self.out

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{lname}.{k}": a
                for lname, layer in self._layers()
                for k, a in layer.arrays().items()}

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters().values())

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.lookback_steps, cfg.feature_count):
            raise DimensionError(
                f"expected (batch, {cfg.lookback_steps}, {cfg.feature_count}), got {x.shape}"
            )

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        h, c_td = nn.dense_forward(x, self.td)
        a, c_attn = nn.attention_forward(h, self.attn, training, rng)
        z = a + h if self.config.residual else a
        n, c_norm = nn.layer_norm_forward(z, self.norm)
        f = n.reshape(n.shape[0], -1)
        c_hidden = []
        for layer in self.hidden:
            f, c = nn.dense_forward(f, layer)
            c_hidden.append(c)
        y, c_out = nn.dense_forward(f, self.out)
        self._cache = (n.shape, c_td, c_attn, c_norm, c_hidden, c_out)
        return y

    def backward(self, dy: np.ndarray, tape: Optional[nn.GradientTape] = None) -> nn.GradientTape:
        """Accumulate d(loss)/d(theta) into ``tape`` given d(loss)/d(output)."""
        if self._cache is None:
            raise UsageError("backward called without a preceding forward pass")
        if tape is None:
            tape = nn.GradientTape.like(self.parameters())
        norm_shape, c_td, c_attn, c_norm, c_hidden, c_out = self._cache

        def push(prefix, grads):
            for k, g in grads.items():
                tape.accumulate(f"{prefix}.{k}", g)

        d, g = nn.dense_backward(dy, c_out, self.out)
        push("out", g)
        for i in reversed(range(len(self.hidden))):
            d, g = nn.dense_backward(d, c_hidden[i], self.hidden[i])
            push(f"hidden{i}", g)
        dz, g = nn.layer_norm_backward(d.reshape(norm_shape), c_norm, self.norm)
        push("norm", g)
        dh, g = nn.attention_backward(dz, c_attn, self.attn)
        push("attn", g)
        if self.config.residual:
            dh = dh + dz
        _, g = nn.dense_backward(dh, c_td, self.td)
        push("td", g)
        self._cache = None
        return tape

    # -- inference -----------------------------------------------------------

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        y = self.forward(x, training=False)
        self._cache = None
        return y

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        arrays = {k: a for k, a in self.parameters().items()}
        meta = {"version": MODEL_FORMAT_VERSION, "config": asdict(self.config),
                "metadata": self.metadata}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "ForecastModel":
        with np.load(path) as bundle:
            meta = json.loads(bundle["__meta__"].tobytes().decode())
            if meta.get("version") != MODEL_FORMAT_VERSION:
                raise ConfigError(f"unsupported model bundle version {meta.get('version')}")
            model = build_model(ModelConfig(**meta["config"]), seed=0)
            model.metadata = meta.get("metadata", {})
            params = model.parameters()
            for name, a in params.items():
                stored = bundle[name]
                if stored.shape != a.shape:
                    raise DimensionError(f"bundle parameter {name} has shape {stored.shape}")
                a[...] = stored
        return model


def build_model(cfg: ModelConfig, seed: int) -> ForecastModel:
    rng = np.random.default_rng(seed)
    td = nn.init_dense(rng, cfg.feature_count, cfg.td_dense_units, "relu")
    attn = nn.init_attention(rng, cfg.td_dense_units, cfg.heads, cfg.head_dim, cfg.attn_dropout)
    norm = nn.init_layer_norm(cfg.td_dense_units)
    width = cfg.lookback_steps * cfg.td_dense_units
    hidden = []
    for _ in range(cfg.dense_layers):
        hidden.append(nn.init_dense(rng, width, cfg.dense_units, "relu"))
        width = cfg.dense_units
    out = nn.init_dense(rng, width, cfg.horizon, "linear")
    return ForecastModel(cfg, td, attn, norm, hidden, out)


def evaluate_mse(model: ForecastModel, inputs: np.ndarray, targets: np.ndarray,
                 chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(inputs), chunk):
        pred = model.predict_batch(inputs[start:start + chunk])
        diff = pred - targets[start:start + chunk]
        total += float(np.sum(diff * diff))
    return total / targets.size


def fit(model: ForecastModel, train, val, hp: Hyperparams, seed: int) -> TrainReport:
    """Minibatch gradient descent for exactly ``hp.epochs`` epochs.

    ``train`` and ``val`` are windowed datasets (anything with ``inputs`` and
    ``targets`` arrays). The model is updated in place.
    """
    x, y = np.asarray(train.inputs, dtype=float), np.asarray(train.targets, dtype=float)
    if len(x) == 0 or len(val.inputs) == 0:
        raise ConfigError("fit needs non-empty train and validation sets")
    model._check_input(x)
    model._check_input(np.asarray(val.inputs))
    rng = np.random.default_rng(seed)
    tape = nn.GradientTape.like(model.parameters())
    flat_params = {"all": model.flat}
    flat_tape = nn.GradientTape({"all": tape.flat})
    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(1, hp.epochs + 1):
        try:
            # overflow is caught by the finiteness checks below, so silence numpy
            with np.errstate(over="ignore", invalid="ignore"):
                train_loss, val_loss = _epoch(model, x, y, val, hp, rng, tape,
                                              flat_params, flat_tape)
        except NumericError as exc:
            raise DivergenceError(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(epoch)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.epochs_run = epoch
    report.wall_time = time.perf_counter() - started
    return report


def _epoch(model, x, y, val, hp, rng, tape, flat_params, flat_tape):
    n = len(x)
    order = rng.permutation(n)
    running = 0.0
    for start in range(0, n, hp.batch_size):
        idx = order[start:start + hp.batch_size]
        pred = model.forward(x[idx], training=True, rng=rng)
        loss, dpred = nn.mse_loss(pred, y[idx])
        if not np.isfinite(loss):
            raise NumericError("non-finite training loss")
        running += loss * len(idx)
        tape.zero()
        model.backward(dpred, tape)
        nn.optimizer_step(flat_params, flat_tape, hp.learning_rate)
    return running / n, evaluate_mse(model, val.inputs, val.targets)


def predict(model: ForecastModel, window: np.ndarray) -> np.ndarray:
    """Forecast the next ``horizon`` standardized demand values from one window."""
    window = np.asarray(window, dtype=float)
    cfg = model.config
    if window.shape != (cfg.lookback_steps, cfg.feature_count):
        raise DimensionError(
            f"window must be ({cfg.lookback_steps}, {cfg.feature_count}), got {window.shape}"
        )
    return model.predict_batch(window[None])[0]


@dataclass
class RollingForecast:
    start_index: int
    hours: np.ndarray
    actual: np.ndarray
    predicted: np.ndarray

    def rows(self):
        for h, a, p in zip(self.hours, self.actual, self.predicted):
            yield int(h), float(a), float(p)


def rolling_forecast(model: ForecastModel, dataset, start_index: int, horizon: int = 24) -> RollingForecast:
    """Predict hours ``N .. N+horizon-1`` from the window ending just before row N.

    ``start_index`` counts rows of the partition the dataset was windowed from;
    values are returned in MW.
    """
    if horizon != model.config.horizon:
        raise ConfigError(f"model forecasts {model.config.horizon} hours, not {horizon}")
    hits = np.flatnonzero(dataset.row_index == start_index)
    if len(hits) == 0:
        lo = int(dataset.row_index.min()) if len(dataset.row_index) else None
        hi = int(dataset.row_index.max()) if len(dataset.row_index) else None
        raise ForecastRangeError(
            f"no complete window starts at hour {start_index} (valid range {lo}..{hi})"
        )
    i = int(hits[0])
    pred = predict(model, dataset.inputs[i])
    actual = dataset.inverse_target(dataset.targets[i])
    return RollingForecast(
        start_index=start_index,
        hours=np.arange(start_index, start_index + horizon),
        actual=actual,
        predicted=dataset.inverse_target(pred),
    )


def with_epochs(hp: Hyperparams, epochs: int) -> Hyperparams:
    return replace(hp, epochs=epochs)
