"""Gated recurrent unit sequence-to-one regressor, written directly in numpy.

A network is a stack of GRU layers followed by one tanh dense layer and an
affine scalar output. Only the top layer's last hidden state reaches the
head. Gradients come from explicit backpropagation through time and are
checked against central finite differences in the test-suite.

Cell equations, per layer and time step::

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    hc = tanh(x Wh + (r * h) Uh + bh)
    h' = (1 - z) * h + z * hc
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError, InvalidInput, ShapeError

GATES = ("z", "r", "h")


@dataclass(frozen=True)
class GruConfig:
    input_dim: int
    hidden_dims: tuple = (32, 64)
    dense_dim: int = 16
    dropout_rates: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        rates = tuple(float(r) for r in self.dropout_rates) or (0.0,) * len(self.hidden_dims)
        object.__setattr__(self, "dropout_rates", rates)
        if self.input_dim < 1:
            raise InvalidInput("input_dim must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InvalidInput("hidden_dims must be a non-empty sequence of positive sizes")
        if self.dense_dim < 1:
            raise InvalidInput("dense_dim must be >= 1")
        if len(rates) != len(self.hidden_dims) or any(not 0 <= r < 1 for r in rates):
            raise InvalidInput("need one dropout rate in [0, 1) per recurrent layer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "GruConfig":
        return cls(**doc)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def parameter_shapes(cfg: GruConfig) -> dict[str, tuple]:
    shapes = {}
    d = cfg.input_dim
    for l, h in enumerate(cfg.hidden_dims):
        for g in GATES:
            shapes[f"layer{l}.W{g}"] = (d, h)
            shapes[f"layer{l}.U{g}"] = (h, h)
            shapes[f"layer{l}.b{g}"] = (h,)
        d = h
    shapes["dense.W"] = (d, cfg.dense_dim)
    shapes["dense.b"] = (cfg.dense_dim,)
    shapes["out.w"] = (cfg.dense_dim,)
    shapes["out.b"] = (1,)
    return shapes


def init_parameters(cfg: GruConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1 and name != "out.w":
            params[name] = np.zeros(shape)
            continue
        fan_in, fan_out = (shape if len(shape) == 2 else (shape[0], 1))
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


class GruNetwork:
    def __init__(self, config: GruConfig, parameters: dict | None = None):
        self.config = config
        shapes = parameter_shapes(config)
        if parameters is None:
            parameters = init_parameters(config)
        if set(parameters) != set(shapes):
            raise ShapeError(f"parameter names do not match config: {sorted(set(parameters) ^ set(shapes))}")
        self.params = {}
        for name, shape in shapes.items():
            arr = np.array(parameters[name], dtype=float).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"non-finite parameter {name}")
            self.params[name] = arr
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])

    def copy(self) -> "GruNetwork":
        return copy.deepcopy(self)

    # -- forward ----------------------------------------------------------

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.config.input_dim:
            raise ShapeError(f"expected input width {self.config.input_dim}, got shape {X.shape}")
        if X.shape[1] < 1:
            raise ShapeError("sequence must have at least one time step")
        return X

    def _layer_forward(self, l, X):
        P = self.params
        H = self.config.hidden_dims[l]
        W = np.concatenate([P[f"layer{l}.W{g}"] for g in GATES], axis=1)
        b = np.concatenate([P[f"layer{l}.b{g}"] for g in GATES])
        Uz, Ur, Uh = (P[f"layer{l}.U{g}"] for g in GATES)
        B, T, _ = X.shape
        A = X @ W + b
        hs = np.empty((B, T, H))
        zs = np.empty((B, T, H))
        rs = np.empty((B, T, H))
        hcs = np.empty((B, T, H))
        h = np.zeros((B, H))
        for t in range(T):
            a = A[:, t]
            z = _sigmoid(a[:, :H] + h @ Uz)
            r = _sigmoid(a[:, H:2 * H] + h @ Ur)
            hc = np.tanh(a[:, 2 * H:] + (r * h) @ Uh)
            h = (1.0 - z) * h + z * hc
            hs[:, t], zs[:, t], rs[:, t], hcs[:, t] = h, z, r, hc
        return hs, (X, W, zs, rs, hcs)

    def _forward(self, X, training):
        caches, masks = [], []
        inp = X
        for l, rate in enumerate(self.config.dropout_rates):
            hs, cache = self._layer_forward(l, inp)
            caches.append((cache, hs))
            if training and rate > 0:
                mask = (self._dropout_rng.random(hs.shape) >= rate) / (1.0 - rate)
                hs = hs * mask
            else:
                mask = None
            masks.append(mask)
            inp = hs
        top = inp[:, -1]
        a = np.tanh(top @ self.params["dense.W"] + self.params["dense.b"])
        y = a @ self.params["out.w"] + self.params["out.b"][0]
        return y, (caches, masks, top, a)

    def forward(self, sequence, training: bool = False) -> float:
        X = self._check(sequence)
        if X.shape[0] != 1:
            raise ShapeError("forward takes a single sequence")
        y, _ = self._forward(X, training)
        return float(y[0])

    def predict(self, sequences) -> np.ndarray:
        """Inference on each sequence separately (no dropout)."""
        return np.array([self.forward(s) for s in sequences])

    # -- backward ---------------------------------------------------------

    def _layer_backward(self, l, cache, hs, dHs, grads):
        X, W, zs, rs, hcs = cache
        P = self.params
        H = self.config.hidden_dims[l]
        Uz, Ur, Uh = (P[f"layer{l}.U{g}"] for g in GATES)
        B, T, D = X.shape
        dUz = np.zeros((H, H))
        dUr = np.zeros((H, H))
        dUh = np.zeros((H, H))
        dA = np.empty((B, T, 3 * H))
        dh_next = np.zeros((B, H))
        zero = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dHs[:, t] + dh_next
            hp = hs[:, t - 1] if t > 0 else zero
            z, r, hc = zs[:, t], rs[:, t], hcs[:, t]
            dz = dh * (hc - hp)
            dhp = dh * (1.0 - z)
            dah = dh * z * (1.0 - hc * hc)
            dUh += (r * hp).T @ dah
            drh = dah @ Uh.T
            dhp += drh * r
            daz = dz * z * (1.0 - z)
            dar = drh * hp * r * (1.0 - r)
            dUz += hp.T @ daz
            dUr += hp.T @ dar
            dhp += daz @ Uz.T + dar @ Ur.T
            dA[:, t, :H] = daz
            dA[:, t, H:2 * H] = dar
            dA[:, t, 2 * H:] = dah
            dh_next = dhp
        flat = dA.reshape(B * T, 3 * H)
        dW = X.reshape(B * T, D).T @ flat
        db = flat.sum(axis=0)
        for k, g in enumerate(GATES):
            sl = slice(k * H, (k + 1) * H)
            grads[f"layer{l}.W{g}"] = dW[:, sl]
            grads[f"layer{l}.b{g}"] = db[sl]
        grads[f"layer{l}.Uz"] = dUz
        grads[f"layer{l}.Ur"] = dUr
        grads[f"layer{l}.Uh"] = dUh
        return dA @ W.T

    def _backward(self, dy, cache):
        caches, masks, top, a = cache
        P = self.params
        grads = {}
        grads["out.w"] = a.T @ dy
        grads["out.b"] = np.array([dy.sum()])
        dpre = np.outer(dy, P["out.w"]) * (1.0 - a * a)
        grads["dense.W"] = top.T @ dpre
        grads["dense.b"] = dpre.sum(axis=0)
        dtop = dpre @ P["dense.W"].T
        B, T, H = caches[-1][1].shape
        d_out = np.zeros((B, T, H))
        d_out[:, -1] = dtop
        for l in range(len(caches) - 1, -1, -1):
            layer_cache, hs = caches[l]
            if masks[l] is not None:
                d_out = d_out * masks[l]
            d_out = self._layer_backward(l, layer_cache, hs, d_out, grads)
        return {name: grads[name] for name in P}

    def batch_gradient(self, X, targets, training=False, scale=1.0):
        """Sum of squared errors over a batch and its gradient times ``scale``."""
        X = self._check(X)
        targets = np.asarray(targets, dtype=float)
        y, cache = self._forward(X, training)
        err = y - targets
        grads = self._backward(2.0 * scale * err, cache)
        return float(err @ err), grads

    def gradient(self, sequence, target) -> dict[str, np.ndarray]:
        """Gradient of ``(forward(sequence) - target)**2`` for every parameter."""
        X = self._check(sequence)
        if X.shape[0] != 1:
            raise ShapeError("gradient takes a single sequence")
        _, grads = self.batch_gradient(X, [target])
        return grads


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def train(
    net: GruNetwork,
    inputs: Sequence[tuple],
    cfg: TrainConfig,
) -> tuple[GruNetwork, list[float]]:
    """Mini-batch Adam on mean squared error; returns a trained copy and per-epoch loss.

    ``inputs`` is a sequence of ``(sequence, target)`` pairs; sequences of
    different lengths are allowed and are grouped by length inside a batch.
    """
    if len(inputs) == 0:
        raise InvalidInput("no training pairs")
    seqs = [net._check(s)[0] for s, _ in inputs]
    targets = np.array([float(t) for _, t in inputs])
    net = net.copy()
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    rng = np.random.default_rng(cfg.seed)
    n = len(seqs)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sse = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            scale = 1.0 / len(batch)
            total = None
            groups: dict[int, list[int]] = {}
            for i in batch:
                groups.setdefault(seqs[i].shape[0], []).append(int(i))
            for length in sorted(groups):
                idx = groups[length]
                X = np.stack([seqs[i] for i in idx])
                loss, grads = net.batch_gradient(X, targets[idx], training=True, scale=scale)
                if not math.isfinite(loss):
                    # stop before a non-finite step poisons the optimizer state
                    raise DivergenceError(epoch, loss)
                sse += loss
                if total is None:
                    total = grads
                else:
                    for k in total:
                        total[k] = total[k] + grads[k]
            if cfg.clip_norm is not None:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in total.values()))
                if norm > cfg.clip_norm:
                    for k in total:
                        total[k] = total[k] * (cfg.clip_norm / norm)
            opt.step(net.params, total)
        mse = sse / n
        if not math.isfinite(mse):
            raise DivergenceError(epoch, mse)
        history.append(mse)
    return net, history


def residual_targets(source_net: GruNetwork, cv_sequences, measured) -> np.ndarray:
    """What the residual model has to learn: measured capacity minus source estimate."""
    measured = np.asarray(measured, dtype=float)
    if len(cv_sequences) != len(measured):
        raise ShapeError(f"{len(cv_sequences)} sequences but {len(measured)} capacities")
    return measured - source_net.predict(cv_sequences)
