"""Network building blocks on top of the autodiff kernel.

Dense layers and a gated recurrent cell (registered by name on a ParamSet),
diagonal Gaussians with the usual VAE operations, categorical/Bernoulli
log-likelihoods, an Adam optimizer and the finite-difference gradient check
every training objective in this package is verified against.

Conventions: batch-major rank-2 arrays (rows are batch items), tanh hidden
activations, identity output heads, log-variances clamped to [-20, 20]
before any downstream use.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeMismatchError, Value

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0
LOG_2PI = float(np.log(2.0 * np.pi))

_ACTIVATIONS = ("tanh", "linear", "sigmoid")


class Gaussian:
    """Diagonal Gaussian; mean and log-variance share a (batch, dim) shape."""

    def __init__(self, mean: Value, log_var: Value):
        mean = ad._wrap(mean)
        log_var = ad.clamp(ad._wrap(log_var), LOG_VAR_MIN, LOG_VAR_MAX)
        if mean.shape != log_var.shape:
            raise ShapeMismatchError(f"mean {mean.shape} vs log_var {log_var.shape}")
        self.mean = mean
        self.log_var = log_var

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @staticmethod
    def standard(shape) -> "Gaussian":
        return Gaussian(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))


def register_dense(params: ParamSet, name: str, n_in: int, n_out: int, activation: str = "tanh"):
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    params.add(f"{name}.W", (n_in, n_out))
    params.add(f"{name}.b", (n_out,), init="zeros")
    params.layers[name] = ("dense", n_in, n_out, activation)


def dense_forward(params: ParamSet, name: str, x: Value) -> Value:
    """Affine map plus the layer's registered nonlinearity."""
    kind, n_in, n_out, activation = params.layers[name]
    if kind != "dense":
        raise ShapeMismatchError(f"layer {name!r} is a {kind}, not dense")
    x = ad._wrap(x)
    if x.data.ndim != 2 or x.shape[1] != n_in:
        raise ShapeMismatchError(
            f"dense layer {name!r} expects (batch, {n_in}) input, got {x.shape}")
    h = ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])
    if activation == "tanh":
        return ad.tanh(h)
    if activation == "sigmoid":
        return ad.sigmoid(h)
    return h


def register_gru(params: ParamSet, name: str, n_in: int, n_hidden: int):
    # gate blocks live in fused matrices, column order [r | z | n]
    params.add(f"{name}.W", (n_in, 3 * n_hidden))
    params.add(f"{name}.U", (n_hidden, 2 * n_hidden))
    params.add(f"{name}.Un", (n_hidden, n_hidden))
    params.add(f"{name}.b", (3 * n_hidden,), init="zeros")
    params.layers[name] = ("gru", n_in, n_hidden)


def gru_input_proj(params: ParamSet, name: str, x: Value) -> Value:
    """x W + b for one or many stacked timesteps; pair with gru_step_proj."""
    return ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def gru_step_proj(params: ParamSet, name: str, xw: Value, h: Value) -> Value:
    """Gated-recurrent update given the precomputed input projection.

    r  = sigmoid(x Wr + br + h Ur)
    z  = sigmoid(x Wz + bz + h Uz)
    n  = tanh(x Wn + bn + r * (h Un))
    h' = (1 - z) * n + z * h
    """
    _, n_in, nh = params.layers[name]
    hu = ad.matmul(h, params[f"{name}.U"])
    r = ad.sigmoid(ad.add(ad.slice_cols(xw, 0, nh), ad.slice_cols(hu, 0, nh)))
    z = ad.sigmoid(ad.add(ad.slice_cols(xw, nh, 2 * nh), ad.slice_cols(hu, nh, 2 * nh)))
    n = ad.tanh(ad.add(ad.slice_cols(xw, 2 * nh, 3 * nh),
                       ad.mul(r, ad.matmul(h, params[f"{name}.Un"]))))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


def gru_step(params: ParamSet, name: str, x: Value, h: Value) -> Value:
    """One gated-recurrent update (formula in gru_step_proj)."""
    kind, n_in, n_hidden = params.layers[name]
    if kind != "gru":
        raise ShapeMismatchError(f"layer {name!r} is a {kind}, not gru")
    x, h = ad._wrap(x), ad._wrap(h)
    if x.data.ndim != 2 or x.shape[1] != n_in or h.data.ndim != 2 or h.shape[1] != n_hidden:
        raise ShapeMismatchError(
            f"gru cell {name!r} expects (batch, {n_in}) and (batch, {n_hidden}), "
            f"got {x.shape} and {h.shape}")
    return gru_step_proj(params, name, gru_input_proj(params, name, x), h)


def log_softmax(logits: Value, temperature: float = 1.0, axis: int = -1) -> Value:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = ad._wrap(logits)
    scaled = ad.mul(logits, 1.0 / temperature)
    # max-subtraction for stability; a detached constant shift leaves both
    # the softmax value and its gradient unchanged
    shift = ad.constant(scaled.data.max(axis=axis, keepdims=True))
    s = ad.sub(scaled, shift)
    if s.data.ndim > 1:
        lse = ad.log(ad.vsum(ad.exp(s), axis=axis, keepdims=True))
    else:
        lse = ad.log(ad.vsum(ad.exp(s)))
    return ad.sub(s, lse)


def softmax_logits(logits: Value, temperature: float = 1.0, axis: int = -1) -> Value:
    """Boltzmann distribution over logits; entries positive, rows sum to 1."""
    return ad.exp(log_softmax(logits, temperature, axis=axis))


def entropy_from_log_probs(log_p: Value, axis: int = -1) -> Value:
    """H = -sum p log p, differentiable through the log-probabilities."""
    p = ad.exp(log_p)
    use_axis = axis if log_p.data.ndim > 1 else None
    return ad.mul(ad.vsum(ad.mul(p, log_p), axis=use_axis), -1.0)


def gaussian_kl(q: Gaussian, p: Gaussian) -> Value:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last axis.

    Returns shape (batch,) for rank-2 inputs and a scalar for rank-1.
    Nonnegative for all inputs; zero iff the distributions coincide.
    """
    if q.mean.shape != p.mean.shape:
        raise ShapeMismatchError(f"KL dims differ: {q.mean.shape} vs {p.mean.shape}")
    diff = ad.sub(q.mean, p.mean)
    log_ratio = ad.sub(p.log_var, q.log_var)
    # 0.5 * sum(exp(lq - lp) + (mq - mp)^2 * exp(-lp) - 1 + lp - lq)
    term = ad.add(ad.add(ad.exp(ad.sub(q.log_var, p.log_var)),
                         ad.mul(ad.mul(diff, diff), ad.exp(ad.mul(p.log_var, -1.0)))),
                  ad.sub(log_ratio, 1.0))
    axis = -1 if q.mean.data.ndim > 1 else None
    return ad.mul(ad.vsum(term, axis=axis), 0.5)


def reparam_sample(g: Gaussian, noise: np.ndarray) -> Value:
    """mean + exp(log_var / 2) * noise; differentiable w.r.t. the Gaussian."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ShapeMismatchError(f"noise shape {noise.shape} != {g.mean.shape}")
    std = ad.exp(ad.mul(g.log_var, 0.5))
    return ad.add(g.mean, ad.mul(std, ad.constant(noise)))


def gaussian_log_density(x, g: Gaussian) -> Value:
    """log N(x; mean, diag exp(log_var)), summed over the last axis."""
    x = ad._wrap(x)
    diff = ad.sub(x, g.mean)
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.mul(g.log_var, -1.0)))
    term = ad.add(ad.add(quad, g.log_var), LOG_2PI)
    axis = -1 if g.mean.data.ndim > 1 else None
    return ad.mul(ad.vsum(term, axis=axis), -0.5)


def bernoulli_log_lik(logits: Value, targets: np.ndarray) -> Value:
    """Per-row log-likelihood of binary targets under independent logits."""
    logits = ad._wrap(logits)
    t = ad.constant(np.asarray(targets, dtype=np.float64))
    # t * log sigmoid(l) + (1 - t) * log sigmoid(-l), via softplus for stability
    ll = ad.sub(ad.mul(t, logits), ad.softplus(logits))
    axis = -1 if logits.data.ndim > 1 else None
    return ad.vsum(ll, axis=axis)


def categorical_log_lik(logits: Value, ids) -> Value:
    """log softmax(logits)[i, ids[i]] per row."""
    lp = log_softmax(logits, 1.0, axis=-1)
    return ad.take_per_row(lp, ids)


class Adam:
    """Adaptive per-parameter moments with bias correction."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k] = b1 * self._m[k] + (1 - b1) * g
            v = self._v[k] = b2 * self._v[k] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def grad_check(objective, params: ParamSet, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `objective` must be a deterministic scalar function of `params` (freeze
    any sampling noise before calling). Relative error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params.zero_grad()
    loss = objective(params)
    loss.backward()
    analytic = {k: (np.zeros_like(v.data) if v.grad is None else v.grad.copy())
                for k, v in params.items()}
    worst = 0.0
    for k, p in params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = objective(params).item()
            flat[i] = orig - epsilon
            f_minus = objective(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    params.zero_grad()
    return worst
