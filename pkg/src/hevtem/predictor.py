"""Driving-condition-aware short-horizon speed forecaster.

A single-block causal self-attention encoder over five input channels
(normalized speed, normalized acceleration, and the recognized style as
three repeated one-hot channels), trained on mean squared error with
adaptive-moment gradient descent. Forward and backward passes are written
directly in numpy; the analytic gradients are validated against central
finite differences in the test suite.

Layout (one encoder block, forecast read at the final time position):

    X (5 x T) -> embed + learned positions -> masked multi-head attention
      -> residual add -> last position -> hidden ReLU layer -> horizon out
      -> denormalize -> clamp at 0

A persistence baseline (repeat the last observed speed) is included for
comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dcr import StyleLabel
from .errors import LengthMismatch, NonFiniteLoss, ShapeError

WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    history_len: int = 60
    horizon: int = 5
    channels: int = 5
    max_positions: int = 256
    heads: int = 4
    key_dim: int = 32
    hidden_dim: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("history_len", "horizon", "channels", "max_positions",
                     "heads", "key_dim", "hidden_dim", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.horizon > self.history_len:
            raise ShapeError("horizon must not exceed the history length")
        if self.history_len > self.max_positions:
            raise ShapeError("history exceeds the positional table")

    @property
    def model_dim(self) -> int:
        return self.heads * self.key_dim


@dataclass(frozen=True)
class Normalization:
    v_mean: float
    v_std: float
    a_mean: float
    a_std: float

    def norm_v(self, v):
        return (np.asarray(v, dtype=float) - self.v_mean) / self.v_std

    def denorm_v(self, z):
        return np.asarray(z, dtype=float) * self.v_std + self.v_mean

    def norm_a(self, a):
        return (np.asarray(a, dtype=float) - self.a_mean) / self.a_std


def fit_normalization(speed_cycles) -> Normalization:
    vs = np.concatenate([np.asarray(c, dtype=float) for c in speed_cycles])
    accs = np.concatenate([np.diff(np.asarray(c, dtype=float))
                           for c in speed_cycles])
    return Normalization(float(vs.mean()), max(float(vs.std()), 1e-6),
                         float(accs.mean()), max(float(accs.std()), 1e-6))


@dataclass(frozen=True)
class InputWindow:
    """Normalized (channels x history) input block; one-hot style rows are
    constant along time and sum to one at every step."""
    x: np.ndarray  # (5, N_his)


def build_input(v_his, a_his, label: StyleLabel, norm: Normalization,
                history_len: int = 60) -> InputWindow:
    v = np.asarray(v_his, dtype=float)
    a = np.asarray(a_his, dtype=float)
    if v.shape != (history_len,) or a.shape != (history_len,):
        raise LengthMismatch(f"expected two series of length {history_len}, "
                             f"got {v.shape} and {a.shape}")
    one_hot = np.zeros(3)
    one_hot[int(label)] = 1.0
    x = np.empty((5, history_len))
    x[0] = norm.norm_v(v)
    x[1] = norm.norm_a(a)
    x[2:] = one_hot[:, None]
    return InputWindow(x)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

PARAM_NAMES = ("w_in", "b_in", "pos", "w_q", "w_k", "w_v", "w_o", "b_o",
               "w_h", "b_h", "w_out", "b_out")


@dataclass
class PredictorWeights:
    config: PredictorConfig
    norm: Normalization
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def check_shapes(self):
        c = self.config
        d = c.model_dim
        expected = {
            "w_in": (c.channels, d), "b_in": (d,),
            "pos": (c.max_positions, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d),
            "w_o": (d, d), "b_o": (d,),
            "w_h": (d, c.hidden_dim), "b_h": (c.hidden_dim,),
            "w_out": (c.hidden_dim, c.horizon), "b_out": (c.horizon,),
        }
        for name, shape in expected.items():
            got = self.params[name].shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")
            if not np.all(np.isfinite(self.params[name])):
                raise ShapeError(f"{name}: non-finite weights")


def init_weights(cfg: PredictorConfig, norm: Normalization,
                 seed: int) -> PredictorWeights:
    rng = np.random.default_rng(seed)
    d = cfg.model_dim

    def glorot(shape):
        scale = np.sqrt(2.0 / (shape[0] + shape[-1]))
        return rng.normal(0.0, scale, size=shape)

    params = {
        "w_in": glorot((cfg.channels, d)),
        "b_in": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.max_positions, d)),
        "w_q": glorot((d, d)),
        "w_k": glorot((d, d)),
        "w_v": glorot((d, d)),
        "w_o": glorot((d, d)),
        "b_o": np.zeros(d),
        "w_h": glorot((d, cfg.hidden_dim)),
        "b_h": np.zeros(cfg.hidden_dim),
        "w_out": glorot((cfg.hidden_dim, cfg.horizon)),
        "b_out": np.zeros(cfg.horizon),
    }
    w = PredictorWeights(cfg, norm, params)
    w.check_shapes()
    return w


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _forward_core(x_bt: np.ndarray, w: PredictorWeights, want_cache: bool):
    """Batched core: ``x_bt`` is (B, T, channels); returns normalized
    horizon outputs (B, horizon) plus an optional backprop cache."""
    cfg = w.config
    p = w.params
    b, t, c = x_bt.shape
    if c != cfg.channels:
        raise ShapeError(f"expected {cfg.channels} channels, got {c}")
    if t > cfg.max_positions:
        raise ShapeError("sequence longer than the positional table")
    d = cfg.model_dim
    heads, dk = cfg.heads, cfg.key_dim

    h0 = x_bt @ p["w_in"] + p["b_in"] + p["pos"][:t]
    q = (h0 @ p["w_q"]).reshape(b, t, heads, dk).transpose(0, 2, 1, 3)
    k = (h0 @ p["w_k"]).reshape(b, t, heads, dk).transpose(0, 2, 1, 3)
    v = (h0 @ p["w_v"]).reshape(b, t, heads, dk).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk)
    scores = scores + _causal_mask(t)
    scores -= scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores)
    attn = expd / expd.sum(axis=-1, keepdims=True)
    zh = attn @ v                                    # (B, H, T, dk)
    z = zh.transpose(0, 2, 1, 3).reshape(b, t, d)
    h1 = h0 + z @ p["w_o"] + p["b_o"]
    last = h1[:, -1, :]
    hidden_pre = last @ p["w_h"] + p["b_h"]
    hidden = np.maximum(hidden_pre, 0.0)
    out = hidden @ p["w_out"] + p["b_out"]
    if not want_cache:
        return out, None
    cache = dict(x_bt=x_bt, h0=h0, q=q, k=k, v=v, attn=attn, z=z, h1=h1,
                 last=last, hidden_pre=hidden_pre, hidden=hidden, t=t, b=b)
    return out, cache


def _backward_core(dout: np.ndarray, w: PredictorWeights, cache: dict,
                   ) -> dict[str, np.ndarray]:
    cfg = w.config
    p = w.params
    b, t = cache["b"], cache["t"]
    d = cfg.model_dim
    heads, dk = cfg.heads, cfg.key_dim

    grads = {}
    grads["w_out"] = cache["hidden"].T @ dout
    grads["b_out"] = dout.sum(axis=0)
    dhidden = dout @ p["w_out"].T
    dhidden_pre = dhidden * (cache["hidden_pre"] > 0.0)
    grads["w_h"] = cache["last"].T @ dhidden_pre
    grads["b_h"] = dhidden_pre.sum(axis=0)
    dlast = dhidden_pre @ p["w_h"].T

    dh1 = np.zeros_like(cache["h1"])
    dh1[:, -1, :] = dlast
    dh0 = dh1.copy()                                 # residual path
    dattn_out = dh1
    z2 = cache["z"].reshape(b * t, d)
    grads["w_o"] = z2.T @ dattn_out.reshape(b * t, d)
    grads["b_o"] = dattn_out.sum(axis=(0, 1))
    dz = (dattn_out @ p["w_o"].T).reshape(b, t, heads, dk).transpose(0, 2, 1, 3)

    attn, v = cache["attn"], cache["v"]
    dattn = dz @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dz
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dk)
    dq = dscores @ cache["k"]
    dk_ = dscores.transpose(0, 1, 3, 2) @ cache["q"]

    h0_2 = cache["h0"].reshape(b * t, d)
    for name, dmat in (("w_q", dq), ("w_k", dk_), ("w_v", dv)):
        flat = dmat.transpose(0, 2, 1, 3).reshape(b * t, d)
        grads[name] = h0_2.T @ flat
        dh0 += (flat @ p[name].T).reshape(b, t, d)

    grads["w_in"] = cache["x_bt"].reshape(b * t, -1).T @ dh0.reshape(b * t, d)
    grads["b_in"] = dh0.sum(axis=(0, 1))
    dpos = np.zeros_like(p["pos"])
    dpos[:t] = dh0.sum(axis=0)
    grads["pos"] = dpos
    return grads


@dataclass(frozen=True)
class Forecast:
    """Predicted speeds (m/s) for the next horizon steps, clamped at 0."""
    speeds_m_s: np.ndarray

    def __len__(self):
        return len(self.speeds_m_s)


def forward(window: InputWindow, w: PredictorWeights) -> Forecast:
    """One-window forecast in m/s (denormalized, clamped at zero)."""
    w.check_shapes()
    if window.x.shape[0] != w.config.channels:
        raise ShapeError(f"input window has {window.x.shape[0]} channels")
    out, _ = _forward_core(window.x.T[None, :, :], w, want_cache=False)
    return Forecast(np.maximum(w.norm.denorm_v(out[0]), 0.0))


def encoded_states(window: InputWindow, w: PredictorWeights) -> np.ndarray:
    """Per-position encoder representations (T, model_dim); test hook for the
    causality property."""
    out, cache = _forward_core(window.x.T[None, :, :], w, want_cache=True)
    return cache["h1"][0]


def attention_weights(window: InputWindow, w: PredictorWeights) -> np.ndarray:
    """(heads, T, T) attention rows for one window; rows sum to one and the
    upper triangle is exactly zero."""
    _, cache = _forward_core(window.x.T[None, :, :], w, want_cache=True)
    return cache["attn"][0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def loss_and_grads(x_batch: np.ndarray, target_norm: np.ndarray,
                   w: PredictorWeights):
    """Mean squared error over (batch x horizon) plus analytic gradients."""
    out, cache = _forward_core(x_batch, w, want_cache=True)
    diff = out - target_norm
    loss = float(np.mean(diff * diff))
    dout = 2.0 * diff / diff.size
    return loss, _backward_core(dout, w, cache)


@dataclass
class TrainResult:
    weights: PredictorWeights
    train_loss: np.ndarray   # per epoch
    val_loss: np.ndarray


def train(windows: list[InputWindow], targets_m_s: np.ndarray,
          cfg: PredictorConfig, norm: Normalization, seed: int) -> TrainResult:
    """Mini-batch adaptive-moment gradient descent on MSE.

    Deterministic for a fixed seed (seeded init, seeded split, seeded batch
    order). Aborts with :class:`NonFiniteLoss` (carrying the epoch index) if
    the loss leaves the reals.
    """
    n = len(windows)
    targets_m_s = np.asarray(targets_m_s, dtype=float)
    if n == 0 or targets_m_s.shape != (n, cfg.horizon):
        raise ShapeError(f"need targets of shape ({n}, {cfg.horizon})")
    x_all = np.stack([win.x.T for win in windows])          # (N, T, C)
    t_all = norm.norm_v(targets_m_s)

    rng = np.random.default_rng(seed)
    w = init_weights(cfg, norm, seed)
    order = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ShapeError("no training windows left after the validation split")

    adam_m = {k: np.zeros_like(v) for k, v in w.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in w.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    train_curve, val_curve = [], []

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch = train_idx[perm[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(x_all[batch], t_all[batch], w)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became non-finite in epoch {epoch}",
                                    epoch=epoch)
            epoch_losses.append(loss)
            step += 1
            corr1 = 1.0 - beta1 ** step
            corr2 = 1.0 - beta2 ** step
            lr = cfg.learning_rate
            for name, g in grads.items():
                adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
                adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * g * g
                m_hat = adam_m[name] / corr1
                v_hat = adam_v[name] / corr2
                w.params[name] = w.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        train_curve.append(float(np.mean(epoch_losses)))
        if len(val_idx):
            val_out, _ = _forward_core(x_all[val_idx], w, want_cache=False)
            val_curve.append(float(np.mean((val_out - t_all[val_idx]) ** 2)))
        else:
            val_curve.append(train_curve[-1])
    return TrainResult(w, np.array(train_curve), np.array(val_curve))


# ---------------------------------------------------------------------------
# baseline and metrics
# ---------------------------------------------------------------------------


def predict_persistence(v_his, horizon: int = 5) -> Forecast:
    """Repeat the last observed speed over the horizon."""
    v = np.asarray(v_his, dtype=float)
    if v.size == 0:
        raise LengthMismatch("persistence needs a nonempty history")
    return Forecast(np.full(horizon, float(v[-1])))


def rmse(forecasts, actuals) -> float:
    """Root mean squared error over all horizon steps of all windows."""
    f = np.asarray(forecasts, dtype=float).ravel()
    a = np.asarray(actuals, dtype=float).ravel()
    if f.shape != a.shape:
        raise LengthMismatch(f"forecasts {f.shape} vs actuals {a.shape}")
    return float(np.sqrt(np.mean((f - a) ** 2)))


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def windows_from_speed_cycles(speed_cycles, classify, cfg: PredictorConfig,
                              norm: Normalization, stride: int = 2):
    """Sliding windows over 1 Hz speed cycles.

    ``classify`` maps a history window (speeds) to a StyleLabel; acceleration
    is the first difference of speed.
    """
    windows, targets = [], []
    t_len, hor = cfg.history_len, cfg.horizon
    for speeds in speed_cycles:
        v = np.asarray(speeds, dtype=float)
        if len(v) < t_len + hor:
            continue
        a = np.empty_like(v)
        a[0] = v[0]
        a[1:] = np.diff(v)
        for end in range(t_len - 1, len(v) - hor, stride):
            v_his = v[end - t_len + 1:end + 1]
            a_his = a[end - t_len + 1:end + 1]
            label = classify(v_his)
            windows.append(build_input(v_his, a_his, label, norm, t_len))
            targets.append(v[end + 1:end + 1 + hor])
    return windows, np.array(targets)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def weights_to_json(w: PredictorWeights) -> str:
    doc = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": {k: getattr(w.config, k) for k in (
            "history_len", "horizon", "channels", "max_positions", "heads",
            "key_dim", "hidden_dim", "learning_rate", "batch_size", "epochs",
            "val_fraction")},
        "norm": {"v_mean": w.norm.v_mean, "v_std": w.norm.v_std,
                 "a_mean": w.norm.a_mean, "a_std": w.norm.a_std},
        "params": {name: {"shape": list(arr.shape),
                          "data": arr.ravel().tolist()}
                   for name, arr in w.params.items()},
    }
    return json.dumps(doc, sort_keys=True)


def weights_from_json(text: str) -> PredictorWeights:
    doc = json.loads(text)
    if doc.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ShapeError(f"unsupported weights format {doc.get('format_version')}")
    cfg = PredictorConfig(**doc["config"])
    norm = Normalization(**doc["norm"])
    params = {name: np.array(entry["data"]).reshape(entry["shape"])
              for name, entry in doc["params"].items()}
    w = PredictorWeights(cfg, norm, params)
    w.check_shapes()
    return w
