"""Self-checks: finite-difference gradients, enumeration oracles, estimator bias.

Each suite returns a list of :class:`Check` rows, which the CLI prints as TSV.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .losses import (
    FAMILIES,
    LossConfig,
    RewardConfig,
    expected_loss_enumerate,
    expected_loss_naive,
    expected_reward_enumerate,
    reinforce_gradient_batch,
    sequence_loss_with_grad,
    supervised_gradient_batch,
)
from .model import (
    PointerNetParams,
    RankingInstance,
    decode_forced,
    forward_batch,
    log_prob_and_grad,
    sequence_loss_and_grad,
    sequence_loss_forced,
)
from .numerics import finite_difference_gradient, make_rng, relative_error
from .optim import init_params

GRAD_TOL = 1e-4
FD_EPS = 1e-5
NORM_TOL = 1e-8
ENUM_TOL = 1e-8
ESTIMATOR_TOL = 0.01


@dataclass
class Check:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool

    def tsv(self) -> str:
        return f"{self.suite}\t{self.name}\t{self.value:.3e}\t{self.threshold:.3e}\t{'PASS' if self.passed else 'FAIL'}"


def random_model(rng, m_raw=4, m=4, rho=8, scale=0.5) -> PointerNetParams:
    """A model with larger-than-init weights so scores are far from uniform."""
    return init_params(m_raw, m, rho, rng, scale=scale)


def random_instance(rng, n: int, m_raw: int = 4) -> RankingInstance:
    y = rng.integers(0, 2, size=n)
    if n >= 2:
        y[rng.integers(0, n)] = 1
        y[(int(np.flatnonzero(y)[0]) + 1) % n] = 0
    return RankingInstance(rng.normal(size=(n, m_raw)), y)


def gradient_suite(seeds=range(20), n: int = 5) -> list[Check]:
    out = []
    for seed in seeds:
        rng = make_rng(1000 + seed)
        params = random_model(rng)
        inst = random_instance(rng, n)
        perm = rng.permutation(n)
        theta = params.flat()
        _, g = log_prob_and_grad(params, inst, perm)
        fd = finite_difference_gradient(lambda th: decode_forced(params.with_flat(th), inst, perm).log_prob,
                                        theta, FD_EPS)
        err = relative_error(g.flat(), fd)
        out.append(Check("gradients", f"seed{seed}/log_prob", err, GRAD_TOL, err < GRAD_TOL))
        for family in FAMILIES:
            cfg = LossConfig(family=family, weight_scheme="dcg")
            _, g = sequence_loss_and_grad(params, inst, perm, cfg)
            fd = finite_difference_gradient(
                lambda th: sequence_loss_forced(params.with_flat(th), inst, perm, cfg), theta, FD_EPS)
            err = relative_error(g.flat(), fd)
            out.append(Check("gradients", f"seed{seed}/{family}", err, GRAD_TOL, err < GRAD_TOL))
    return out


def permutation_mass(params: PointerNetParams, inst: RankingInstance) -> float:
    return sum(math.exp(decode_forced(params, inst, p).log_prob)
               for p in itertools.permutations(range(inst.n)))


def sampled_losses(params, inst, config: LossConfig, draws: int, rng, chunk: int = 20000) -> np.ndarray:
    """Sequence losses of ``draws`` permutations sampled from the model."""
    out = []
    left = draws
    while left > 0:
        b = min(chunk, left)
        X = np.broadcast_to(inst.features, (b,) + inst.features.shape)
        fwd = forward_batch(params, X, kernels.SAMPLE, rng=rng)
        out.extend(sequence_loss_with_grad(fwd.scores[k], inst.labels, fwd.perm[k], config)[0]
                   for k in range(b))
        left -= b
    return np.asarray(out)


def oracle_suite(draws: int = 200_000, seed: int = 0) -> list[Check]:
    out = []
    rng = make_rng(2000 + seed)
    for n in (2, 3, 4, 5):
        params = random_model(rng)
        inst = random_instance(rng, n)
        err = abs(permutation_mass(params, inst) - 1.0)
        out.append(Check("oracle", f"chain_rule/n={n}", err, NORM_TOL, err <= NORM_TOL))
    for n in (1, 2, 3, 4, 5):
        params = random_model(rng)
        inst = random_instance(rng, n)
        for family in FAMILIES:
            cfg = LossConfig(family=family, weight_scheme="dcg")
            err = abs(expected_loss_enumerate(params, inst, cfg) - expected_loss_naive(params, inst, cfg))
            out.append(Check("oracle", f"prefix_vs_naive/n={n}/{family}", err, ENUM_TOL, err <= ENUM_TOL))
    params = random_model(rng)
    inst = random_instance(rng, 4)
    cfg = LossConfig()
    exact = expected_loss_enumerate(params, inst, cfg)
    losses = sampled_losses(params, inst, cfg, draws, rng)
    se = losses.std(ddof=1) / math.sqrt(draws)
    z = abs(losses.mean() - exact) / se
    out.append(Check("oracle", "monte_carlo_expected_loss/n=4 (z)", z, 3.0, z <= 3.0))
    return out


def estimator_model(seed: int = 0):
    rng = make_rng(3000 + seed)
    return random_model(rng), rng


def supervised_estimator_error(draws: int = 200_000, seed: int = 0, chunk: int = 10_000):
    """Relative L2 error of the averaged sampling-policy estimator vs. the exact gradient."""
    params, rng = estimator_model(seed)
    inst = random_instance(rng, 4)
    cfg = LossConfig()
    exact_loss = expected_loss_enumerate(params, inst, cfg)
    exact = finite_difference_gradient(
        lambda th: expected_loss_enumerate(params.with_flat(th), inst, cfg), params.flat(), FD_EPS)
    total = np.zeros_like(exact)
    left = draws
    while left > 0:
        b = min(chunk, left)
        # a fixed baseline makes one batch of b copies equal to b batch-1 draws averaged
        g, _ = supervised_gradient_batch(params, [inst] * b, cfg, baseline=exact_loss, rng=rng)
        total += g.flat() * b
        left -= b
    return relative_error(total / draws, exact)


def reinforce_estimator_error(draws: int = 200_000, seed: int = 0, chunk: int = 10_000):
    params, rng = estimator_model(seed + 1)
    inst = RankingInstance(rng.normal(size=(3, params.m_raw)), [0, 1, 1])
    rcfg = RewardConfig("ndcg", 2)
    exact_reward = expected_reward_enumerate(params, inst, rcfg)
    exact = -finite_difference_gradient(
        lambda th: expected_reward_enumerate(params.with_flat(th), inst, rcfg), params.flat(), FD_EPS)
    total = np.zeros_like(exact)
    left = draws
    while left > 0:
        b = min(chunk, left)
        g, _ = reinforce_gradient_batch(params, [inst] * b, rcfg, baseline=exact_reward, rng=rng)
        total += g.flat() * b
        left -= b
    return relative_error(total / draws, exact)


def estimator_suite(draws: int = 200_000, seed: int = 0) -> list[Check]:
    sup = supervised_estimator_error(draws, seed)
    rei = reinforce_estimator_error(draws, seed)
    return [
        Check("estimators", "supervised_sampling/n=4", sup, ESTIMATOR_TOL, sup < ESTIMATOR_TOL),
        Check("estimators", "reinforce_ndcg@2/n=3", rei, ESTIMATOR_TOL, rei < ESTIMATOR_TOL),
    ]


SUITES = {
    "gradients": lambda draws: gradient_suite(),
    "oracle": lambda draws: oracle_suite(draws),
    "estimators": lambda draws: estimator_suite(draws),
}
