"""Small float64 neural-network stack: tanh MLPs, Gaussian heads, Adam.

Backward passes are written by hand and validated against central finite
differences in the test suite. Only what the three losses (MSE, Gaussian NLL,
clipped policy surrogate) require is implemented.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError

VAR_MIN = 1e-6  # m^2 floor on predicted variances


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Fully connected net, tanh hidden activations, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0):
        if len(sizes) < 2:
            raise ShapeError("Mlp needs at least input and output sizes")
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(sizes[i], sizes[i + 1]))
            if i == len(sizes) - 2:
                w = w * out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(sizes[i + 1]))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: np.ndarray):
        """Return (output, cache); x is (batch, in_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected input (batch, {self.sizes[0]}), got {x.shape}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. params and input."""
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        dz = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[i]
            grads[2 * i] = a_prev.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dh = dz @ self.weights[i].T
            if i > 0:
                dz = dh * (1.0 - acts[i] ** 2)  # tanh'
            else:
                dz = dh
        return grads, dz


class GaussianHead:
    """MLP backbone emitting (mu, s); variance = softplus(s) + VAR_MIN."""

    def __init__(self, in_dim: int, hidden: list[int], rng: np.random.Generator, init_s: float = -7.0):
        self.backbone = Mlp([in_dim] + list(hidden) + [2], rng)
        # bias the raw variance channel so initial sigma is a few centimetres
        self.backbone.biases[-1][1] = init_s

    def params(self) -> list[np.ndarray]:
        return self.backbone.params()

    def forward(self, x: np.ndarray):
        y, acts = self.backbone.forward(x)
        mu = y[:, 0]
        s = y[:, 1]
        var = softplus(s) + VAR_MIN
        return mu, var, (acts, s)

    def predict(self, x: np.ndarray):
        mu, var, _ = self.forward(x)
        return mu, var

    def nll_and_grads(self, x: np.ndarray, target: np.ndarray):
        """Mean Gaussian NLL and parameter gradients."""
        target = np.asarray(target, dtype=np.float64)
        mu, var, (acts, s) = self.forward(x)
        if target.shape != mu.shape:
            raise ShapeError("target batch does not match input batch")
        n = mu.shape[0]
        loss = gaussian_nll(mu, var, target)
        err = mu - target
        dmu = err / var / n
        dvar = (0.5 / var - 0.5 * err**2 / var**2) / n
        ds = dvar * sigmoid(s)
        grad_out = np.stack([dmu, ds], axis=1)
        grads, _ = self.backbone.backward(acts, grad_out)
        return loss, grads


def gaussian_nll(mu: np.ndarray, var: np.ndarray, target: np.ndarray) -> float:
    """Mean of 0.5*log(var) + (target - mu)^2 / (2 var)."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mu.shape != var.shape or mu.shape != target.shape:
        raise ShapeError("mu, var, target must share a shape")
    if np.any(var <= 0.0):
        raise NumericalError("variance must be strictly positive")
    loss = float(np.mean(0.5 * np.log(var) + (target - mu) ** 2 / (2.0 * var)))
    if not np.isfinite(loss):
        raise NumericalError("gaussian_nll evaluated to a non-finite value")
    return loss


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("prediction and target shapes differ")
    loss = float(np.mean((pred - target) ** 2))
    if not np.isfinite(loss):
        raise NumericalError("mse evaluated to a non-finite value")
    return loss


class Adam:
    """Adam with bias correction; state per parameter array."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr_scale: float = 1.0) -> None:
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ShapeError("parameter/gradient lists do not match optimizer state")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape or p.shape != self.m[i].shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p -= lr_scale * self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["t"][0])
        for i in range(len(self.m)):
            self.m[i] = tensors[f"m{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = tensors[f"v{i}"].reshape(self.v[i].shape).copy()


def clip_grads_(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale the gradient list in place to a global norm <= max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_params_from_flat(params: list[np.ndarray], flat: np.ndarray) -> None:
    i = 0
    for p in params:
        n = p.size
        p[...] = flat[i : i + n].reshape(p.shape)
        i += n
    if i != flat.size:
        raise ShapeError("flat vector size does not match parameter count")
