"""Fully-connected denoising autoencoder trained with Adam.

Hidden layers use a leaky rectifier; the bottleneck and the output layer use
the logistic sigmoid, so latent codes and reconstructions both live in [0, 1].
All arithmetic is float64.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .rng import derive_rng

log = logging.getLogger(__name__)

MAGIC = b"DAE1"
DEFAULT_DIMS = (4096, 1024, 256, 64, 32, 64, 256, 1024, 4096)


class DaeFormatError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    sigma: float = 0.01
    beta: float = 1e-4
    learning_rate: float = 0.01
    lr_decay: float = 0.95
    batch_size: int = 1000
    max_epochs: int = 100
    seed: int = 0
    leak: float = 0.01

    def __post_init__(self):
        if self.sigma < 0 or self.beta < 0:
            raise ValueError("sigma and beta must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")


@dataclass
class DaeModel:
    weights: list  # weights[l] has shape (in_dim, out_dim)
    biases: list
    leak: float = 0.01
    sigma: float = 0.01
    beta: float = 1e-4
    # maps raw inputs into the range the network was trained on
    input_scale: float = 1.0
    input_offset: float = 0.0

    def __post_init__(self):
        dims = self.layer_dims
        if len(self.weights) % 2 or not self.weights:
            raise ValueError("encoder and decoder must have the same number of layers")
        if list(dims) != list(reversed(dims)):
            raise ValueError(f"layer dims {dims} are not mirror-symmetric")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not match weight shape {w.shape}")
        for w_prev, w in zip(self.weights, self.weights[1:]):
            if w_prev.shape[1] != w.shape[0]:
                raise ValueError(f"weight shapes {w_prev.shape} and {w.shape} do not chain")

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.weights[self.bottleneck].shape[1]

    @property
    def bottleneck(self) -> int:
        """Index of the layer whose output is the latent code."""
        return len(self.weights) // 2 - 1

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def with_params(self, params: Sequence[np.ndarray]) -> "DaeModel":
        n = len(self.weights)
        return replace(self, weights=list(params[:n]), biases=list(params[n:]))

    def prepare(self, x) -> np.ndarray:
        """Flatten raw inputs to (n, input_dim) rows and apply the input affine map."""
        arr = np.asarray(x, dtype=np.float64)
        if arr.size == 0 or arr.size % self.input_dim:
            raise ValueError(f"input of shape {arr.shape} does not match input dim {self.input_dim}")
        return arr.reshape(-1, self.input_dim) * self.input_scale + self.input_offset


def init_model(dims: Sequence[int], seed: int = 0, leak: float = 0.01, sigma: float = 0.01,
               beta: float = 1e-4, output_mean: Optional[np.ndarray] = None) -> DaeModel:
    """Glorot-uniform weights and zero biases.

    If ``output_mean`` is given, the output bias starts at its logit so the
    untrained network already reproduces the mean input. Without this the
    first Adam steps spend themselves shifting the output level and tend to
    saturate the sigmoid bottleneck.
    """
    rng = derive_rng(seed, "dae/init")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if output_mean is not None:
        mean = np.clip(np.asarray(output_mean, dtype=np.float64).reshape(-1), 1e-3, 1.0 - 1e-3)
        biases[-1] = np.log(mean / (1.0 - mean))
    return DaeModel(weights, biases, leak=leak, sigma=sigma, beta=beta)


def corrupt(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def _rows(m: DaeModel, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    elif arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] != m.input_dim:
        raise ValueError(f"input dim {arr.shape[1]} does not match model input dim {m.input_dim}")
    return arr


def _is_sigmoid(m: DaeModel, layer: int) -> bool:
    return layer == m.bottleneck or layer == len(m.weights) - 1


def _forward_cache(m: DaeModel, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        s = a @ w + b
        pre.append(s)
        a = expit(s) if _is_sigmoid(m, l) else np.where(s > 0, s, m.leak * s)
        acts.append(a)
    return acts, pre


def forward(m: DaeModel, x_tilde):
    """Return ``(z, x_hat)`` for one input (1-D) or a batch of rows."""
    X = _rows(m, x_tilde)
    acts, _ = _forward_cache(m, X)
    z, x_hat = acts[m.bottleneck + 1], acts[-1]
    if np.ndim(x_tilde) == 1:
        return z[0], x_hat[0]
    return z, x_hat


def encode(m: DaeModel, x) -> np.ndarray:
    """Latent code of the clean input; no corruption at inference."""
    return forward(m, x)[0]


def reconstruct(m: DaeModel, x) -> np.ndarray:
    return forward(m, x)[1]


def weight_penalty(m: DaeModel) -> float:
    return float(sum(np.sum(w * w) for w in m.weights))


def loss(m: DaeModel, X, X_hat) -> float:
    """Mean squared reconstruction norm plus beta times the squared weight norm."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"batch shapes differ: {X.shape} vs {X_hat.shape}")
    if X.ndim == 1:
        X, X_hat = X[None], X_hat[None]
    n = X.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    diff = (X - X_hat).reshape(n, -1)
    return float(np.sum(diff * diff) / n + m.beta * weight_penalty(m))


def backward(m: DaeModel, x, x_tilde):
    """Loss and its gradient w.r.t. every weight and bias.

    ``x`` is the clean target, ``x_tilde`` the corrupted network input. Both may
    be a single vector or a batch of rows. Gradients come back in the order of
    ``DaeModel.params()``.
    """
    X = _rows(m, x)
    Xt = _rows(m, x_tilde)
    if X.shape != Xt.shape:
        raise ValueError(f"clean and corrupted batches differ: {X.shape} vs {Xt.shape}")
    n = X.shape[0]
    acts, pre = _forward_cache(m, Xt)
    diff = acts[-1] - X
    value = float(np.sum(diff * diff) / n + m.beta * weight_penalty(m))

    n_layers = len(m.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = (2.0 / n) * diff
    for l in range(n_layers - 1, -1, -1):
        if _is_sigmoid(m, l):
            a = acts[l + 1]
            delta = delta * a * (1.0 - a)
        else:
            delta = delta * np.where(pre[l] > 0, 1.0, m.leak)
        gw[l] = acts[l].T @ delta + 2.0 * m.beta * m.weights[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = delta @ m.weights[l].T
    return value, gw + gb


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new params and a new state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape}, {g.shape}, {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, step=step, m=new_m, v=new_v)


def fit_input_affine(X: np.ndarray) -> tuple[float, float]:
    """Scale and offset mapping the corpus range onto [0, 1]."""
    lo, hi = float(X.min()), float(X.max())
    if hi - lo <= 0:
        return 1.0, -lo
    scale = 1.0 / (hi - lo)
    return scale, -lo * scale


def train(corpus, cfg: TrainConfig, dims: Sequence[int] = DEFAULT_DIMS, normalize_inputs: bool = False,
          epoch_callback=None):
    """Train a DAE on ``corpus`` (an (n, ...) array or a list of equally shaped tensors).

    Returns ``(model, history)`` where ``history[e]`` is the sample-weighted mean
    training loss of epoch ``e``. With ``normalize_inputs`` the corpus range is
    mapped to [0, 1] first and the map is stored on the model.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if isinstance(corpus, np.ndarray):
        data = corpus.astype(np.float64, copy=False)
    else:
        shapes = {np.shape(x) for x in corpus}
        if len(shapes) != 1:
            raise ValueError(f"corpus tensors have inconsistent shapes: {sorted(shapes)}")
        data = np.stack([np.asarray(x, dtype=np.float64) for x in corpus])
    data = data.reshape(data.shape[0], -1)
    if data.shape[1] != dims[0]:
        raise ValueError(f"corpus items have {data.shape[1]} values but the input layer has {dims[0]}")

    scale, offset = fit_input_affine(data) if normalize_inputs else (1.0, 0.0)
    X = data * scale + offset
    model = init_model(dims, cfg.seed, leak=cfg.leak, sigma=cfg.sigma, beta=cfg.beta,
                       output_mean=X.mean(axis=0))
    model = replace(model, input_scale=scale, input_offset=offset)

    shuffle_rng = derive_rng(cfg.seed, "dae/shuffle")
    noise_rng = derive_rng(cfg.seed, "dae/corrupt")
    state = AdamState()
    params = model.params()
    history = []
    n = X.shape[0]
    for epoch in range(cfg.max_epochs):
        lr = cfg.learning_rate * cfg.lr_decay**epoch
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx]
            xt = corrupt(xb, cfg.sigma, noise_rng)
            value, grads = backward(model, xb, xt)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch + 1, value)
            total += value * len(idx)
            params, state = adam_step(params, grads, state, lr)
            model = model.with_params(params)
        history.append(total / n)
        log.debug("epoch %d loss %.6g", epoch + 1, history[-1])
        if epoch_callback is not None:
            epoch_callback(epoch + 1, history[-1])
    return model, history


def save_dae(m: DaeModel, path) -> None:
    parts = [MAGIC, struct.pack("<I", len(m.weights))]
    for w, b in zip(m.weights, m.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<dd", m.input_scale, m.input_offset))
    Path(path).write_bytes(b"".join(parts))


def load_dae(path, leak: float = 0.01, sigma: float = 0.01, beta: float = 1e-4) -> DaeModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DaeFormatError(f"{path}: bad magic {buf[:4]!r}")
    try:
        (n_layers,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        weights, biases = [], []
        for _ in range(n_layers):
            d_in, d_out = struct.unpack_from("<II", buf, pos)
            pos += 8
            w = np.frombuffer(buf, dtype="<f8", count=d_in * d_out, offset=pos).reshape(d_in, d_out)
            pos += 8 * d_in * d_out
            b = np.frombuffer(buf, dtype="<f8", count=d_out, offset=pos)
            pos += 8 * d_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        scale, offset = struct.unpack_from("<dd", buf, pos)
        pos += 16
    except (struct.error, ValueError) as exc:
        raise DaeFormatError(f"{path}: truncated model file ({exc})") from None
    if pos != len(buf):
        raise DaeFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return DaeModel(weights, biases, leak=leak, sigma=sigma, beta=beta, input_scale=scale,
                    input_offset=offset)
