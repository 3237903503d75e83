"""Small numerical helpers shared by the model, losses and trainer.

Everything here works in float64. Random streams come from numpy's Philox
bit generator (the counter-based Philox-4x64 with 10 rounds), a fixed,
documented algorithm that yields the same stream on every platform for a
given seed.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class NumericError(ValueError):
    """Raised when a computation would produce or consume non-finite values."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a generator on numpy's Philox-4x64 counter-based bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _excluded_mask(n: int, excluded: Iterable[int]) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for i in excluded:
        mask[int(i)] = True
    return mask


def masked_softmax(scores, excluded=()) -> np.ndarray:
    """Softmax over the entries of ``scores`` not listed in ``excluded``.

    Excluded entries get probability exactly zero.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericError("masked_softmax: non-finite score")
    mask = excluded if isinstance(excluded, np.ndarray) and excluded.dtype == bool \
        else _excluded_mask(s.shape[0], excluded)
    if mask.all():
        raise NumericError("masked_softmax: empty support")
    live = ~mask
    shifted = s - s[live].max()
    e = np.where(live, np.exp(np.where(live, shifted, 0.0)), 0.0)
    return e / e.sum()


def logsumexp(s, gamma: float = 1.0) -> float:
    s = np.asarray(s, dtype=np.float64)
    top = s.max()
    return float(top + np.log(np.exp(gamma * (s - top)).sum()) / gamma)


def smooth_max(s, gamma: float) -> float:
    """``(1/gamma) * log(sum(exp(gamma * s)))``, computed without overflow."""
    if gamma <= 0:
        raise ValueError(f"smooth_max: gamma must be positive, got {gamma}")
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("smooth_max: empty input")
    return logsumexp(s, gamma)


def smooth_min(s, gamma: float) -> float:
    return -smooth_max(-np.asarray(s, dtype=np.float64), gamma)


def smooth_max_grad(s, gamma: float) -> np.ndarray:
    """Gradient of :func:`smooth_max`: the gamma-tempered softmax of ``s``."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(gamma * (s - s.max()))
    return e / e.sum()


def sample_categorical(probs, rng: np.random.Generator) -> int:
    """Draw an index with probability ``probs[i]``; zero-mass entries are never drawn."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("sample_categorical: negative probability")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"sample_categorical: probabilities sum to {p.sum()!r}")
    return categorical_from_uniform(p, rng.random())


def categorical_from_uniform(weights: np.ndarray, u: float) -> int:
    """Inverse-CDF pick from unnormalised non-negative ``weights`` with ``u`` in [0, 1)."""
    cum = np.cumsum(weights)
    hit = np.flatnonzero(cum > u * cum[-1])
    if hit.size:
        return int(hit[0])
    return int(np.flatnonzero(weights > 0)[-1])


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``theta``."""
    if eps <= 0:
        raise ValueError("finite_difference_gradient: eps must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for k in range(theta.size):
        old = theta[k]
        theta[k] = old + eps
        up = f(theta.copy())
        theta[k] = old - eps
        down = f(theta.copy())
        theta[k] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"finite_difference_gradient: non-finite value at coordinate {k}")
        grad[k] = (up - down) / (2.0 * eps)
    return grad


def relative_error(a, b) -> float:
    """Relative L2 error ``|a - b| / max(|a|, |b|)``; zero when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
