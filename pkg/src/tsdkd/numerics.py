"""Probability and divergence kernels with hand-derived gradients.

Every quantity is in nats. Functions that take logits operate on the last
axis, so a single row ``(V,)`` and a stack of rows ``(L, V)`` are both
accepted. ``0 * log 0`` is taken to be 0 throughout.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, NonFiniteError

# Returned by kl_divergence when q has a zero where p does not.
KL_INFINITY = np.inf

# Probabilities below this contribute nothing to an entropy sum.
_ENTROPY_FLOOR = 1e-300


def as_real(x) -> np.ndarray:
    """Float64 array, or long double when the input already is one."""
    a = np.asarray(x)
    return a.astype(np.longdouble if a.dtype == np.longdouble else np.float64, copy=False)


def real_scalar(x):
    """Python float, or a long double scalar when the input is long double."""
    a = np.asarray(x)
    return a[()] if a.dtype == np.longdouble else float(a)


def _as_logits(logits) -> np.ndarray:
    z = as_real(logits)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise InvalidInputError("logit row must be non-empty")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    return z


def _check_beta(beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise InvalidParameterError(f"beta must lie in (0, 1), got {beta}")


def log_softmax(logits) -> np.ndarray:
    """Log-probabilities of the softmax of ``logits`` (max-shifted)."""
    z = _as_logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def token_entropy(logits) -> np.ndarray | float:
    """Shannon entropy of softmax(logits) in nats.

    Returns a float for a single row, otherwise an array with the last axis
    reduced.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    terms = np.where(p < _ENTROPY_FLOOR, 0.0, -p * logp)
    h = np.maximum(terms.sum(axis=-1), 0.0)
    return real_scalar(h) if h.ndim == 0 else h


def entropy_value_and_grad(logits) -> tuple[np.ndarray | float, np.ndarray]:
    """Entropy and its gradient with respect to the logits.

    dH/dz_i = -p_i (log p_i + H)
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = np.where(p < _ENTROPY_FLOOR, 0.0, -p * logp).sum(axis=-1, keepdims=True)
    grad = -p * (logp + h)
    h = h[..., 0]
    return (real_scalar(h) if h.ndim == 0 else h), grad


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; ``KL_INFINITY`` when q misses part of p's support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"need two equal-length rows, got {p.shape} and {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        return KL_INFINITY
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def generalized_jsd(p, q, beta: float) -> float:
    """beta*KL(p||m) + (1-beta)*KL(q||m) with m = beta*p + (1-beta)*q."""
    _check_beta(beta)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"need two equal-length rows, got {p.shape} and {q.shape}")
    m = beta * p + (1.0 - beta) * q
    return beta * kl_divergence(p, m) + (1.0 - beta) * kl_divergence(q, m)


def _xlogy_ratio(p: np.ndarray, logp: np.ndarray, logm: np.ndarray) -> np.ndarray:
    # p * (log p - log m) with 0 * anything = 0
    with np.errstate(invalid="ignore"):
        return np.where(p > 0, p * (logp - logm), 0.0)


def jsd_value_and_grad(teacher, student_logits, beta: float):
    """Generalized JSD(beta)(teacher || softmax(student_logits)) and its logit gradient.

    The teacher is a constant. Works row-wise: ``teacher`` and
    ``student_logits`` may be ``(V,)`` or ``(L, V)``; the value then has the
    leading shape and the gradient matches ``student_logits``.

    With q = softmax(z) and m the mixture, dJSD/dq_i = (1-beta) log(q_i/m_i),
    pushed through the softmax Jacobian.
    """
    _check_beta(beta)
    p = as_real(teacher)
    logq = log_softmax(student_logits)
    if p.shape != logq.shape:
        raise InvalidInputError(f"teacher {p.shape} and student {logq.shape} disagree")
    q = np.exp(logq)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    logm = np.logaddexp(np.log(beta) + logp, np.log1p(-beta) + logq)
    value = (beta * _xlogy_ratio(p, logp, logm).sum(axis=-1)
             + (1.0 - beta) * (q * (logq - logm)).sum(axis=-1))
    g = (1.0 - beta) * (logq - logm)
    grad = q * (g - (q * g).sum(axis=-1, keepdims=True))
    value = np.maximum(value, 0.0)
    return (real_scalar(value) if value.ndim == 0 else value), grad


def forward_kl_value_and_grad(teacher, student_logits):
    """KL(teacher || student) and its gradient q - p w.r.t. student logits."""
    p = as_real(teacher)
    logq = log_softmax(student_logits)
    if p.shape != logq.shape:
        raise InvalidInputError(f"teacher {p.shape} and student {logq.shape} disagree")
    q = np.exp(logq)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    value = _xlogy_ratio(p, logp, logq).sum(axis=-1)
    grad = q - p
    return (real_scalar(value) if value.ndim == 0 else value), grad


def reverse_kl_value_and_grad(teacher, student_logits):
    """KL(student || teacher) and its gradient w.r.t. student logits.

    Infinite (``KL_INFINITY``) when the teacher assigns zero mass where the
    student does not; the gradient is then undefined and returned as NaN.
    """
    p = as_real(teacher)
    logq = log_softmax(student_logits)
    if p.shape != logq.shape:
        raise InvalidInputError(f"teacher {p.shape} and student {logq.shape} disagree")
    q = np.exp(logq)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p)
        r = logq - logp
        value = (q * r).sum(axis=-1)
        grad = q * (r - value[..., None])
    return (real_scalar(value) if value.ndim == 0 else value), grad


def numerical_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5,
                       dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``dtype=np.longdouble`` evaluates ``fn`` at extended-precision points,
    which helps when some true gradient entries are exactly zero.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    x = np.array(point, dtype=dtype)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function not finite near coordinate {i}")
        grad_flat[i] = (fp - fm) / (2.0 * step)
    return out


def finite_difference_check(fn: Callable, point, step: float = 1e-5, grad=None,
                            dtype=np.float64) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``fn`` maps a point to either a scalar or a ``(scalar, gradient)`` pair.
    When ``grad`` is omitted the analytic gradient is taken from ``fn(point)``.
    Relative error per coordinate is ``|a - n| / max(|a|, 1e-8)``.
    """
    x = np.array(point, dtype=float)
    base = fn(x) if grad is None else None
    if grad is None:
        if not isinstance(base, tuple):
            raise InvalidInputError("no analytic gradient given and fn returned a scalar")
        grad = base[1]
    grad = np.asarray(grad, dtype=float)
    if grad.shape != x.shape:
        raise InvalidInputError(f"gradient shape {grad.shape} != point shape {x.shape}")

    def scalar(y):
        out = fn(y)
        return out[0] if isinstance(out, tuple) else out

    if not np.isfinite(scalar(x)):
        raise NonFiniteError("function is not finite at the base point")
    numeric = numerical_gradient(scalar, x, step, dtype=dtype).astype(float)
    err = np.abs(grad - numeric) / np.maximum(np.abs(grad), 1e-8)
    return float(err.max()) if err.size else 0.0
