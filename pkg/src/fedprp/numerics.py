"""Dense float64 primitives with hand-coded gradients.

Vectors are 1-D numpy arrays, batches are 2-D arrays with one sample per row,
and weight matrices have shape ``(out_dim, in_dim)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, InputError

KL_FLOOR = 1e-12


def as_real(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def affine_forward(x, W, b, tape: GradTape | None = None) -> np.ndarray:
    """Return ``W x + b`` for a vector or a batch of row vectors."""
    x = as_real(x)
    W = as_real(W)
    b = as_real(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ConfigError(
            f"affine dims incompatible: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    out = x @ W.T + b
    if tape is not None:
        tape.record("affine", x, W)
    return out


def affine_backward(grad_out: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients of an affine layer: ``(dx, dW, db)``."""
    if grad_out.ndim == 1:
        return W.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ W, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x, tape: GradTape | None = None) -> np.ndarray:
    x = as_real(x)
    out = np.maximum(x, 0.0)
    if tape is not None:
        tape.record("relu", x)
    return out


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0.0)


def softmax(logits) -> np.ndarray:
    z = as_real(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_real(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logsumexp(a, axis: int = -1) -> np.ndarray:
    a = as_real(a)
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax_ce(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single logit vector returns ``(loss, grad)``. For a batch (2-D
    logits with a label array) the loss is the batch mean and the gradient is
    that of the mean.
    """
    z = as_real(logits)
    n_cls = z.shape[-1]
    labels = np.asarray(label)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise InputError(f"label out of range for {n_cls} logits")
    logp = log_softmax(z)
    probs = np.exp(logp)
    if z.ndim == 1:
        grad = probs.copy()
        grad[int(labels)] -= 1.0
        return float(-logp[int(labels)]), grad
    rows = np.arange(z.shape[0])
    grad = probs
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return float(-logp[rows, labels].mean()), grad


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors, with ``0 log 0 = 0``."""
    p = as_real(p)
    q = as_real(q)
    if p.shape != q.shape:
        raise InputError(f"shape mismatch {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise InputError(f"{name} is not a probability vector")
    mask = p > 0
    qf = np.maximum(q[mask], KL_FLOOR)
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qf))))


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    eps: float = 1e-5,
) -> float:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(params)`` must return ``(loss, grad)`` with ``grad`` shaped like
    ``params``. Returns the max over coordinates of
    ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigError(f"eps must be in (0, 1e-2], got {eps}")
    params = as_real(params).copy()
    _, g_a = loss_fn(params.copy())
    g_a = as_real(g_a).reshape(-1)
    flat = params.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        f_plus = loss_fn(params.copy())[0]
        flat[i] = old - eps
        f_minus = loss_fn(params.copy())[0]
        flat[i] = old
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(g_a[i] - g_fd) / max(1.0, abs(g_a[i]), abs(g_fd))
        worst = max(worst, err)
    return worst


class GradTape:
    """Ordered record of affine/relu applications for one backward pass."""

    def __init__(self):
        self._records: list[tuple[str, np.ndarray, np.ndarray | None]] = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def record(self, op: str, x: np.ndarray, W: np.ndarray | None = None):
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._records.append((op, x, W))

    def backward(self, grad_out):
        """Propagate ``grad_out`` through the recorded ops in reverse.

        Returns ``(grad_input, layer_grads)`` where ``layer_grads`` holds one
        ``(dW, db)`` pair per recorded affine op, in recording order.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._consumed = True
        g = as_real(grad_out)
        layer_grads = []
        for op, x, W in reversed(self._records):
            if op == "affine":
                g, dW, db = affine_backward(g, x, W)
                layer_grads.append((dW, db))
            else:
                g = relu_backward(g, x)
        layer_grads.reverse()
        self._records.clear()
        return g, layer_grads
