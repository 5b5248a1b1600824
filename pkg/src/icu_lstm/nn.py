"""Single-layer LSTM classifier written directly in numpy.

Gate order inside the stacked weight matrices is input, forget, output,
candidate (i, f, o, g). Every array is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import N_CHANNELS
from .preprocess import ChannelGrid, ChannelStats, LabeledWindow, N_LOS_CLASSES

BINARY = "binary"
MULTICLASS = "multiclass-4"
TASK_CLASSES = {BINARY: 1, MULTICLASS: N_LOS_CLASSES}

LOG_CLIP = 1e-12
GRAD_CLIP_NORM = 5.0
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
MODEL_FORMAT = "icu-lstm-model/1"


class TrainingDiverged(RuntimeError):
    pass


def sigmoid(z):
    # Split by sign so large |z| never overflows exp.
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LstmParams:
    """Stacked gate weights: ``W`` is 4H x D, ``U`` is 4H x H, ``b`` is 4H."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = self.U.shape[1]
        if self.W.shape != (4 * H, self.W.shape[1]) or self.U.shape != (4 * H, H) \
                or self.b.shape != (4 * H,):
            raise ValueError(f"inconsistent LSTM shapes {self.W.shape}, {self.U.shape}, "
                             f"{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def inputs(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str):
        """Return ``(W_name, U_name, b_name)`` views for one gate."""
        k = "ifog".index(name)
        H = self.hidden
        sl = slice(k * H, (k + 1) * H)
        return self.W[sl], self.U[sl], self.b[sl]

    @classmethod
    def zeros(cls, hidden: int, inputs: int = N_CHANNELS) -> "LstmParams":
        return cls(np.zeros((4 * hidden, inputs)), np.zeros((4 * hidden, hidden)),
                   np.zeros(4 * hidden))


@dataclass
class HeadParams:
    V: np.ndarray  # C x H
    c: np.ndarray  # C

    def __post_init__(self):
        if self.V.ndim != 2 or self.c.shape != (self.V.shape[0],):
            raise ValueError(f"inconsistent head shapes {self.V.shape}, {self.c.shape}")

    @property
    def n_out(self) -> int:
        return self.V.shape[0]

    @classmethod
    def zeros(cls, n_out: int, hidden: int) -> "HeadParams":
        return cls(np.zeros((n_out, hidden)), np.zeros(n_out))


def param_dict(p: LstmParams, head: HeadParams) -> dict[str, np.ndarray]:
    return {"W": p.W, "U": p.U, "b": p.b, "V": head.V, "c": head.c}


def from_param_dict(d) -> tuple[LstmParams, HeadParams]:
    return LstmParams(d["W"], d["U"], d["b"]), HeadParams(d["V"], d["c"])


def init_params(hidden: int, n_out: int, rng: np.random.Generator,
                inputs: int = N_CHANNELS) -> tuple[LstmParams, HeadParams]:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases, forget bias 1."""
    s = 1.0 / math.sqrt(hidden)
    W = rng.uniform(-s, s, (4 * hidden, inputs))
    U = rng.uniform(-s, s, (4 * hidden, hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    V = rng.uniform(-s, s, (n_out, hidden))
    return LstmParams(W, U, b), HeadParams(V, np.zeros(n_out))


@dataclass(frozen=True)
class ModelConfig:
    hidden_units: int = 64
    dropout_rate: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 100
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        for name in ("hidden_units", "epochs", "batch_size", "folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


# ---------------------------------------------------------------------------
# forward / backward


def lstm_cell_forward(x, h_prev, c_prev, p: LstmParams):
    """One LSTM step. Accepts single vectors or row-stacked batches."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = p.hidden
    if x.shape[-1] != p.inputs or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
                         f"for D={p.inputs}, H={H}")
    z = x @ p.W.T + h_prev @ p.U.T + p.b
    ifo = sigmoid(z[..., :3 * H])
    i, f, o = ifo[..., :H], ifo[..., H:2 * H], ifo[..., 2 * H:]
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, o, g, tc)
    return h, c, cache


@dataclass
class ForwardCache:
    steps: list
    h_final: np.ndarray
    dropout_mask: Optional[np.ndarray]
    h_head: np.ndarray
    probs: np.ndarray
    p: LstmParams = field(repr=False)
    head: HeadParams = field(repr=False)


def forward_batch(X, p: LstmParams, head: HeadParams, dropout_mask=None):
    """Run a batch ``X`` of shape (B, T, D); returns (probabilities, cache).

    Binary heads give shape (B,), 4-class heads give (B, 4). ``dropout_mask``
    multiplies the final hidden state and already includes the 1/(1-rate)
    scaling.
    """
    X = np.asarray(X, dtype=np.float64)
    B, T, _ = X.shape
    h = np.zeros((B, p.hidden))
    c = np.zeros((B, p.hidden))
    steps = []
    for t in range(T):
        h, c, cache = lstm_cell_forward(X[:, t, :], h, c, p)
        steps.append(cache)
    h_head = h if dropout_mask is None else h * dropout_mask
    logits = h_head @ head.V.T + head.c
    if head.n_out == 1:
        probs = sigmoid(logits[:, 0])
    else:
        probs = softmax(logits)
    if not np.isfinite(probs).all():
        raise TrainingDiverged("non-finite activation in forward pass")
    return probs, ForwardCache(steps, h, dropout_mask, h_head, probs, p, head)


def forward_sequence(grid: ChannelGrid, p: LstmParams, head: HeadParams, dropout_mask=None):
    """Single-window forward pass; returns (probability or 4-vector, cache)."""
    mask = None if dropout_mask is None else np.asarray(dropout_mask)[None, :]
    probs, cache = forward_batch(grid.values[None], p, head, mask)
    return probs[0], cache


def loss(output, label) -> float:
    """Mean cross-entropy.

    Outputs with the same rank as the labels are binary probabilities;
    outputs with one extra trailing axis are class-probability vectors.
    """
    output = np.asarray(output, dtype=np.float64)
    label = np.asarray(label)
    if output.ndim == label.ndim:
        per = _bce(output, label)
    elif output.ndim == label.ndim + 1:
        per = _cce(np.atleast_2d(output), np.atleast_1d(label))
    else:
        raise ValueError(f"cannot pair outputs {output.shape} with labels {label.shape}")
    return float(np.mean(per))


def _bce(p, y):
    p = np.clip(p, LOG_CLIP, 1.0 - LOG_CLIP)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def _cce(P, y):
    picked = P[np.arange(len(y)), y.astype(int)]
    return -np.log(np.clip(picked, LOG_CLIP, 1.0 - LOG_CLIP))


def per_example_loss(probs, labels):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    return _bce(probs, labels) if probs.ndim == 1 else _cce(probs, labels)


def backward_bptt(cache: ForwardCache, labels, loss_scale: float = 1.0):
    """Exact gradients of ``loss_scale * mean cross-entropy`` for the cached pass.

    Returns ``(LstmParams, HeadParams)`` holding the gradients.
    """
    p, head = cache.p, cache.head
    probs = cache.probs
    labels = np.atleast_1d(np.asarray(labels))
    B = len(labels)
    H = p.hidden
    if probs.ndim == 1 or probs.ndim == 0:
        dlogits = (np.atleast_1d(probs) - labels)[:, None]
    else:
        probs2 = np.atleast_2d(probs)
        onehot = np.zeros_like(probs2)
        onehot[np.arange(B), labels.astype(int)] = 1.0
        dlogits = probs2 - onehot
    dlogits = dlogits * (loss_scale / B)

    dV = dlogits.T @ cache.h_head
    dc_head = dlogits.sum(axis=0)
    dh = dlogits @ head.V
    if cache.dropout_mask is not None:
        dh = dh * cache.dropout_mask

    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = np.zeros_like(p.b)
    dc_next = np.zeros_like(dh)
    dz = np.empty((B, 4 * H))
    for x, h_prev, c_prev, i, f, o, g, tc in reversed(cache.steps):
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dW += dz.T @ x
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ p.U
        dc_next = dc * f
    return LstmParams(dW, dU, db), HeadParams(dV, dc_head)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Apply one bias-corrected Adam update; returns new (params, state)."""
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, w in params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {w.shape}")
        m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m[k] / (1.0 - ADAM_BETA1 ** t)
        v_hat = v[k] / (1.0 - ADAM_BETA2 ** t)
        new_params[k] = w - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_params, AdamState(t, m, v)


def clip_global_norm(grads: dict, max_norm: float = GRAD_CLIP_NORM):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def dropout_mask(rng: np.random.Generator, shape, rate: float):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# training and inference


@dataclass
class TrainedModel:
    lstm: LstmParams
    head: HeadParams
    stats: ChannelStats
    task: str
    frame_hours: int
    training_log: list
    config: ModelConfig

    def __eq__(self, other):
        if not isinstance(other, TrainedModel):
            return NotImplemented
        a = param_dict(self.lstm, self.head)
        b = param_dict(other.lstm, other.head)
        return (self.task == other.task and self.frame_hours == other.frame_hours
                and self.training_log == other.training_log and self.config == other.config
                and self.stats == other.stats
                and all(np.array_equal(a[k], b[k]) for k in a))


def window_targets(windows: Sequence[LabeledWindow], task: str) -> np.ndarray:
    if task == BINARY:
        return np.array([w.mortality_label for w in windows], dtype=np.float64)
    if task == MULTICLASS:
        if any(w.los_class is None for w in windows):
            raise ValueError("multiclass training needs los_class on every window")
        return np.array([w.los_class for w in windows], dtype=np.int64)
    raise ValueError(f"unknown task {task!r}")


def stack_grids(grids: Sequence[ChannelGrid]) -> np.ndarray:
    frames = {g.frame_hours for g in grids}
    if len(frames) != 1:
        raise ValueError(f"windows have mixed frame lengths {sorted(frames)}")
    return np.stack([g.values for g in grids])


def train(windows: Sequence[LabeledWindow], task: str, cfg: ModelConfig,
          stats: Optional[ChannelStats] = None) -> TrainedModel:
    """Mini-batch Adam training with a per-epoch seeded shuffle.

    ``stats`` is the normalization the windows were prepared with; it is
    stored on the model so inference can reuse it.
    """
    if not windows:
        raise ValueError("empty training set")
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}")
    X = stack_grids([w.grid for w in windows])
    y = window_targets(windows, task)
    n = len(X)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    lstm, head = init_params(cfg.hidden_units, TASK_CLASSES[task], rng)
    params = param_dict(lstm, head)
    opt = AdamState.zeros_like(params)
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lstm, head = from_param_dict(params)
            mask = dropout_mask(rng, (len(idx), cfg.hidden_units), cfg.dropout_rate)
            probs, cache = forward_batch(X[idx], lstm, head, mask)
            batch_loss = per_example_loss(probs, y[idx])
            total += float(batch_loss.sum())
            g_lstm, g_head = backward_bptt(cache, y[idx])
            grads, _ = clip_global_norm(param_dict(g_lstm, g_head))
            params, opt = adam_step(params, grads, opt, cfg.learning_rate)
        mean_loss = total / n
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1}")
        log.append(mean_loss)
    lstm, head = from_param_dict(params)
    if stats is None:
        stats = ChannelStats(np.zeros(N_CHANNELS), np.ones(N_CHANNELS))
    return TrainedModel(lstm, head, stats, task, int(X.shape[1]), log, cfg)


def predict_batch(model: TrainedModel, grids: Sequence[ChannelGrid]) -> np.ndarray:
    for g in grids:
        if g.frame_hours != model.frame_hours:
            raise ValueError(f"stay {g.stay_id!r}: frame {g.frame_hours} h does not match "
                             f"model frame {model.frame_hours} h")
    if not grids:
        return np.zeros((0,) if model.task == BINARY else (0, model.head.n_out))
    probs, _ = forward_batch(stack_grids(grids), model.lstm, model.head)
    return probs


def predict(model: TrainedModel, grid: ChannelGrid):
    """Dropout-free probability (binary) or 4-vector (multiclass) for one grid."""
    return predict_batch(model, [grid])[0]


def decide(probs):
    """Decision for one prediction.

    A scalar is a mortality probability (``p >= 0.5`` means class 1); a
    vector is a LOS distribution (argmax, lowest index wins ties).
    """
    probs = np.asarray(probs)
    if probs.ndim == 0:
        return int(probs >= 0.5)
    return int(np.argmax(probs))


def decide_batch(probs, task: str) -> np.ndarray:
    probs = np.asarray(probs)
    if task == BINARY:
        return (probs >= 0.5).astype(np.int64)
    return np.argmax(probs, axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: TrainedModel) -> dict:
    arrays = param_dict(model.lstm, model.head)
    return {
        "format": MODEL_FORMAT,
        "task": model.task,
        "frame_hours": model.frame_hours,
        "config": vars(model.config).copy(),
        "training_log": list(model.training_log),
        "stats": {"mean": model.stats.mean.tolist(), "sd": model.stats.sd.tolist()},
        "params": {k: {"shape": list(a.shape), "data": a.ravel().tolist()}
                   for k, a in arrays.items()},
    }


def model_from_dict(d: dict) -> TrainedModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in d["params"].items()}
    lstm, head = from_param_dict(arrays)
    stats = ChannelStats(np.array(d["stats"]["mean"]), np.array(d["stats"]["sd"]))
    return TrainedModel(lstm, head, stats, d["task"], int(d["frame_hours"]),
                        list(d["training_log"]), ModelConfig(**d["config"]))


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")


def load_model(path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
