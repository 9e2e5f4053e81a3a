"""Functional building blocks on top of the tape: activations, losses,
batch normalization, gradient reversal, and the two optimizers used."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, apply_primitive, as_tensor

BN_EPS = 1e-5


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    return apply_primitive("transpose", [x])


def sigmoid(x) -> Tensor:
    return apply_primitive("sigmoid", [x])


def relu(x) -> Tensor:
    return apply_primitive("relu", [x])


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return apply_primitive("leaky_relu", [x], slope=slope)


def exp(x) -> Tensor:
    return apply_primitive("exp", [x])


def log(x) -> Tensor:
    return apply_primitive("log", [x])


def square(x) -> Tensor:
    return apply_primitive("square", [x])


def power(x, p: float) -> Tensor:
    return apply_primitive("power", [x], p=p)


def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    return apply_primitive("clamp", [x], lo=lo, hi=hi)


def softmax(x, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", [x], axis=axis)


def concat(xs, axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(xs), axis=axis)


def row_sum(x) -> Tensor:
    return apply_primitive("row_sum", [x])


def dropout(x, mask: np.ndarray, rate: float) -> Tensor:
    return apply_primitive("dropout", [x], mask=mask, rate=rate)


def elu(x) -> Tensor:
    # relu(x) + exp(min(x, 0)) - 1
    return relu(x) + exp(clamp(x, hi=0.0)) - 1.0


def gradient_reversal(x, beta: float) -> Tensor:
    """Identity forward; scales the upstream gradient by ``-beta``."""
    return apply_primitive("gradient_reversal", [x], beta=float(beta))


def symmetrize_triu(v, n: int) -> Tensor:
    return apply_primitive("symmetrize_triu", [v], n=n)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, num_classes: int | None = None) -> Tensor:
    """Batch-mean cross-entropy of ``(m, C)`` logits against class indices."""
    logits = as_tensor(logits)
    c = logits.shape[-1] if num_classes is None else num_classes
    target = one_hot(labels, c)
    return -(log_softmax(logits) * target).sum() / float(target.shape[0])


def mse(a: Tensor, b) -> Tensor:
    return square(as_tensor(a) - b).mean()


def kl_divergence(p_logits, q_logits, temperature) -> Tensor:
    """Batch-mean KL(softmax(p/T) || softmax(q/T)); ``temperature`` may be a tensor."""
    t = as_tensor(temperature)
    log_p = log_softmax(as_tensor(p_logits) / t)
    log_q = log_softmax(as_tensor(q_logits) / t)
    p = exp(log_p)
    return (p * (log_p - log_q)).sum() / float(p.shape[0])


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BatchNormState:
    """Per-feature affine parameters plus running statistics."""

    dim: int
    momentum: float = 0.1
    eps: float = BN_EPS
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = Tensor(np.ones(self.dim), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(self.dim), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.dim)
        if self.running_var is None:
            self.running_var = np.ones(self.dim)


@dataclass
class BNStats:
    """Differentiable batch statistics of one BN call next to the running ones."""

    mean: Tensor
    var: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


def _weighted_moments(x: Tensor, weights) -> tuple[Tensor, Tensor]:
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    if weights is None:
        mean = flat.mean(axis=0)
        var = square(flat - mean).mean(axis=0)
        return mean, var
    w = as_tensor(weights).reshape(-1, 1)
    total = w.sum()
    mean = (flat * w).sum(axis=0) / total
    var = (square(flat - mean) * w).sum(axis=0) / total
    return mean, var


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train", weights=None,
               capture: list | None = None) -> Tensor:
    """Normalize the last axis of ``x``.

    ``weights`` (broadcastable to ``x.shape[:-1]``) weight each row in the batch
    statistics; padded nodes get weight 0. Modes:

    * ``train``   normalize with batch statistics, update running statistics
    * ``eval``    normalize with running statistics
    * ``capture`` normalize with running statistics, but compute the batch
      statistics as tensors (appended to ``capture``) without touching state
    """
    x = as_tensor(x)
    if x.shape[-1] != state.dim:
        from .tensor import ShapeError
        raise ShapeError(f"batch_norm expects dim {state.dim}, got {x.shape[-1]}")
    if mode not in ("train", "eval", "capture"):
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    if mode == "eval":
        scale = state.gamma / np.sqrt(state.running_var + state.eps)
        return (x - state.running_mean) * scale + state.beta

    mean, var = _weighted_moments(x, weights)
    if capture is not None:
        capture.append(BNStats(mean, var, state.running_mean.copy(), state.running_var.copy()))
    if mode == "capture":
        scale = state.gamma / np.sqrt(state.running_var + state.eps)
        return (x - state.running_mean) * scale + state.beta

    state.batch_mean = mean.data.copy()
    state.batch_var = var.data.copy()
    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * state.batch_mean
    state.running_var = (1.0 - m) * state.running_var + m * state.batch_var
    inv_std = power(var + state.eps, -0.5)
    return (x - mean) * (inv_std * state.gamma) + state.beta


# ---------------------------------------------------------------------------
# optimizers


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale the joint gradient of ``params`` to L2 norm <= ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, scale: float = 1.0) -> None:
        lr = self.lr * scale
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, scale: float = 1.0) -> None:
        """One update with learning rate ``lr * scale``."""
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * scale
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
