"""Per-step losses, sequence loss, expected loss and batch gradient estimators.

At decoder step ``j`` the per-step loss only looks at items that are not yet
placed. Labels of placed items are dropped and the cross-entropy targets are
renormalised over what remains; once no positive is left the step costs 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .metrics import reward
from .model import (
    PointerNetParams,
    RankingInstance,
    backward_batch,
    decode_forced,
    decode_step,
    decoder_input,
    encode,
    forward_batch,
    initial_decoder_state,
    log_prob_grad_scores,
    step_masks,
)
from .numerics import masked_softmax, smooth_max_grad

FAMILIES = ("xent", "hinge", "smooth_hinge")
WEIGHT_SCHEMES = ("uniform", "dcg", "topk")
POLICIES = ("sample", "greedy")


@dataclass
class LossConfig:
    family: str = "xent"
    gamma: float = 1.0
    weight_scheme: str = "uniform"
    k: Optional[int] = None
    policy: str = "sample"
    smooth_outer: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.weight_scheme == "topk" and (self.k is None or self.k < 1):
            raise ValueError("topk weighting needs k >= 1")


@dataclass
class RewardConfig:
    metric: str = "ndcg"
    k: int = 10

    def __post_init__(self):
        if self.metric not in ("ndcg", "map"):
            raise ValueError(f"unknown reward metric {self.metric!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _live_mask(n: int, excluded) -> np.ndarray:
    if isinstance(excluded, np.ndarray) and excluded.dtype == bool:
        return ~excluded
    live = np.ones(n, dtype=bool)
    live[list(excluded)] = False
    return live


def xent_with_grad(s, y, live):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    target = np.where(live, y, 0.0)
    total = target.sum()
    if total == 0:
        return 0.0, np.zeros_like(s)
    target /= total
    p = masked_softmax(s, ~live)
    nz = target > 0
    loss = -float((target[nz] * np.log(p[nz])).sum())
    grad = np.where(live, p - target, 0.0)
    return loss, grad


def hinge_with_grad(s, y, live, gamma: Optional[float] = None, smooth_outer: bool = False):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y)
    pos = np.flatnonzero(live & (y == 1))
    neg = np.flatnonzero(live & (y == 0))
    grad = np.zeros_like(s)
    if pos.size == 0 or neg.size == 0:
        return 0.0, grad
    if gamma is None:
        ip = pos[np.argmin(s[pos])]
        ineg = neg[np.argmax(s[neg])]
        margin = 1.0 - s[ip] + s[ineg]
        if margin <= 0:
            return 0.0, grad
        grad[ip] -= 1.0
        grad[ineg] += 1.0
        return float(margin), grad
    sp = -s[pos]
    spmax = sp.max()
    smin = -(spmax + math.log(np.exp(gamma * (sp - spmax)).sum()) / gamma)
    sn = s[neg]
    snmax = sn.max()
    smax = snmax + math.log(np.exp(gamma * (sn - snmax)).sum()) / gamma
    margin = 1.0 - smin + smax
    inner = np.zeros_like(s)
    inner[pos] = -smooth_max_grad(-s[pos], gamma)
    inner[neg] = smooth_max_grad(s[neg], gamma)
    if smooth_outer:
        # softplus with the same temperature
        z = gamma * margin
        loss = (max(z, 0.0) + math.log1p(math.exp(-abs(z)))) / gamma
        sig = 0.5 * (1.0 + math.tanh(0.5 * z))
        return float(loss), sig * inner
    if margin <= 0:
        return 0.0, grad
    return float(margin), inner


def per_step_xent(s, y, excluded=()) -> float:
    return xent_with_grad(s, y, _live_mask(len(s), excluded))[0]


def per_step_hinge(s, y, excluded=(), smooth: Optional[float] = None, smooth_outer: bool = False) -> float:
    return hinge_with_grad(s, y, _live_mask(len(s), excluded), smooth, smooth_outer)[0]


def per_step_with_grad(s, y, live, config: LossConfig):
    if config.family == "xent":
        return xent_with_grad(s, y, live)
    if config.family == "hinge":
        return hinge_with_grad(s, y, live)
    return hinge_with_grad(s, y, live, config.gamma, config.smooth_outer)


def position_weights(n: int, scheme: str = "uniform", k: Optional[int] = None) -> np.ndarray:
    """Per-position loss weights: all ones, ``1/log2(j+1)``, or ones for the first ``k``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    j = np.arange(1, n + 1, dtype=np.float64)
    if scheme == "uniform":
        return np.ones(n)
    if scheme == "dcg":
        return 1.0 / np.log2(j + 1.0)
    if scheme == "topk":
        if k is None or k < 1:
            raise ValueError("topk weighting needs k >= 1")
        return (j <= k).astype(np.float64)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def sequence_loss_with_grad(S, y, perm, config: LossConfig):
    """Sequence loss over the decoder steps present in ``S`` and its gradient w.r.t. ``S``."""
    S = np.asarray(S, dtype=np.float64)
    T, n = S.shape
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape[0] != n or len(y) != n:
        raise ValueError("scores, labels and permutation sizes disagree")
    w = position_weights(n, config.weight_scheme, config.k)
    masks = step_masks(perm, T, n)
    total = 0.0
    dS = np.zeros_like(S)
    for j in range(T):
        if w[j] == 0.0:
            continue
        loss, g = per_step_with_grad(S[j], y, ~masks[j], config)
        total += w[j] * loss
        dS[j] = w[j] * g
    return total, dS


def sequence_loss(S, y, perm, config: LossConfig) -> float:
    return sequence_loss_with_grad(S, y, perm, config)[0]


# -- expected loss -----------------------------------------------------------------

def expected_loss_enumerate(params: PointerNetParams, instance: RankingInstance,
                            config: LossConfig, cap: int = 7) -> float:
    """Exact expected sequence loss by enumerating placed prefixes.

    Each prefix contributes its probability times the loss of the next step;
    suffix probabilities sum to one and never need enumerating.
    """
    n = instance.n
    if n > cap:
        raise ValueError(
            f"n={n} exceeds the enumeration cap of {cap}; estimate the expectation "
            "by Monte-Carlo sampling instead")
    if params.reverse_input:
        order = np.arange(n)[::-1]
        inst = instance.reordered(order)
        params = params.copy()
        params.reverse_input = False
    else:
        inst = instance
    w = position_weights(n, config.weight_scheme, config.k)
    memory = encode(params, inst)
    y = inst.labels

    def visit(state, last, placed: list, prob: float) -> float:
        j = len(placed)
        live = np.ones(n, dtype=bool)
        live[placed] = False
        scores, probs, new_state = decode_step(
            params, memory, state, decoder_input(params, inst, last), ~live)
        acc = 0.0
        if w[j] != 0.0:
            acc += prob * w[j] * per_step_with_grad(scores, y, live, config)[0]
        if j + 1 < n:
            for i in np.flatnonzero(live):
                acc += visit(new_state, int(i), placed + [int(i)], prob * probs[i])
        return acc

    return visit(initial_decoder_state(memory), None, [], 1.0)


def expected_loss_naive(params: PointerNetParams, instance: RankingInstance, config: LossConfig) -> float:
    """Expected sequence loss as a direct probability-weighted sum over all permutations."""
    total = 0.0
    for perm in itertools.permutations(range(instance.n)):
        tr = decode_forced(params, instance, perm)
        total += math.exp(tr.log_prob) * sequence_loss(tr.scores, instance.labels, perm, config)
    return total


def expected_reward_enumerate(params: PointerNetParams, instance: RankingInstance,
                              reward_config: RewardConfig) -> float:
    total = 0.0
    for perm in itertools.permutations(range(instance.n)):
        tr = decode_forced(params, instance, perm)
        total += math.exp(tr.log_prob) * reward(perm, instance.labels, reward_config.metric, reward_config.k)
    return total


# -- batch gradient estimators -----------------------------------------------------

def _groups(batch: Sequence[RankingInstance]):
    groups: dict = {}
    for inst in batch:
        groups.setdefault(inst.n, []).append(inst)
    for n in sorted(groups):
        yield n, groups[n]


def supervised_gradient_batch(params: PointerNetParams, batch: Sequence[RankingInstance],
                              config: LossConfig, baseline: Optional[float] = None, rng=None,
                              dropout: float = 0.0, onestep: bool = False):
    """Monte-Carlo gradient of the expected sequence loss over a batch.

    With the sampling policy each instance contributes
    ``(L - b) * grad log p(perm) + grad L``; with the greedy policy only
    ``grad L`` of the greedy permutation. The one-step variant trains only
    the first-step loss. Returns ``(gradient, mean loss)``.
    """
    if not batch:
        raise ValueError("empty batch")
    b = 0.0 if baseline is None else float(baseline)
    grad = params.zeros_like()
    total_loss = 0.0
    for n, group in _groups(batch):
        X = np.stack([inst.features for inst in group])
        T = 1 if onestep else n
        mode = kernels.SAMPLE if (config.policy == "sample" and not onestep) else kernels.GREEDY
        fwd = forward_batch(params, X, mode, rng=rng, n_steps=T, dropout=dropout)
        perms = fwd.perm
        dS = np.zeros_like(fwd.scores)
        if mode == kernels.SAMPLE:
            masks = step_masks(perms, T, n)
            _, dlogp, _ = log_prob_grad_scores(fwd.scores, perms, masks)
        for k, inst in enumerate(group):
            loss, dL = sequence_loss_with_grad(fwd.scores[k], inst.labels, perms[k], config)
            total_loss += loss
            dS[k] = dL
            if mode == kernels.SAMPLE:
                dS[k] += (loss - b) * dlogp[k]
        g = backward_batch(params, fwd, dS)
        grad = _add(grad, g)
    scale = 1.0 / len(batch)
    return grad.map(lambda t: t * scale), total_loss * scale


def reinforce_gradient_batch(params: PointerNetParams, batch: Sequence[RankingInstance],
                             reward_config: RewardConfig, baseline: Optional[float] = None, rng=None,
                             dropout: float = 0.0):
    """Policy-gradient estimate for maximising the expected reward.

    The returned gradient is that of the negated reward, so it can be fed to
    the same minimising optimizer. Returns ``(gradient, mean reward)``.
    """
    if not batch:
        raise ValueError("empty batch")
    b = 0.0 if baseline is None else float(baseline)
    grad = params.zeros_like()
    total = 0.0
    for n, group in _groups(batch):
        X = np.stack([inst.features for inst in group])
        fwd = forward_batch(params, X, kernels.SAMPLE, rng=rng, dropout=dropout)
        masks = step_masks(fwd.perm, n, n)
        _, dlogp, _ = log_prob_grad_scores(fwd.scores, fwd.perm, masks)
        rewards = np.array([reward(fwd.perm[k], inst.labels, reward_config.metric, reward_config.k)
                            for k, inst in enumerate(group)])
        total += rewards.sum()
        dS = -(rewards - b)[:, None, None] * dlogp
        grad = _add(grad, backward_batch(params, fwd, dS))
    scale = 1.0 / len(batch)
    return grad.map(lambda t: t * scale), total * scale


def _add(a: PointerNetParams, b: PointerNetParams) -> PointerNetParams:
    return PointerNetParams(**{n: getattr(a, n) + getattr(b, n) for n in a.names()},
                            reverse_input=a.reverse_input)
