"""Initialisation, Adam, L2 penalty, moving-average baselines and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .losses import LossConfig, RewardConfig, reinforce_gradient_batch, supervised_gradient_batch
from .metrics import evaluate
from .model import TENSOR_ORDER, PointerNetParams, RankingInstance, save_checkpoint
from .numerics import NumericError, make_rng

log = logging.getLogger(__name__)

INIT_SCALE = 0.1


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr0: float = 3e-4
    decay_every: int = 1000
    decay_factor: float = 0.96
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 3e-4
    dropout: float = 0.1
    baseline_decay: float = 0.99
    max_steps: int = 1000
    eval_every: int = 0
    seed: int = 0
    objective: str = "supervised"
    loss: LossConfig = field(default_factory=LossConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    hidden_size: int = 128
    proj_dim: Optional[int] = None
    onestep: bool = False
    reverse_input: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if not 0 <= self.baseline_decay < 1:
            raise ValueError("baseline_decay must be in [0, 1)")
        if self.objective not in ("supervised", "reinforce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.onestep and self.objective == "reinforce":
            raise ValueError("the one-step decoder is trained with the supervised objective only")

    def lr_at(self, step: int) -> float:
        return lr_at(step, self.lr0, self.decay_every, self.decay_factor)


def init_params(m_raw: int, m: int, rho: int, rng, projection: Optional[bool] = None,
                scale: float = INIT_SCALE) -> PointerNetParams:
    """Every entry i.i.d. uniform on ``[-scale, scale]``, drawn in tensor order.

    The input projection is created when ``projection`` is true, or by default
    when ``m != m_raw``.
    """
    if min(m_raw, m, rho) < 1:
        raise ValueError("dimensions must be >= 1")
    if projection is None:
        projection = m != m_raw
    if not projection and m != m_raw:
        raise ValueError("m must equal m_raw when the input projection is disabled")
    shapes = {
        "proj": (m_raw, m), "enc_W": (m + rho, 4 * rho), "enc_b": (4 * rho,),
        "dec_W": (m + rho, 4 * rho), "dec_b": (4 * rho,), "W_enc": (rho, rho),
        "W_dec": (rho, rho), "v": (rho,), "go": (m,),
    }
    tensors = {}
    for name in TENSOR_ORDER:
        if name == "proj" and not projection:
            continue
        tensors[name] = rng.uniform(-scale, scale, shapes[name])
    return PointerNetParams(**tensors)


def lr_at(step: int, lr0: float = 3e-4, decay_every: int = 1000, decay_factor: float = 0.96) -> float:
    """Staircase decay: ``lr0 * decay_factor ** (step // decay_every)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 * decay_factor ** (step // decay_every)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: PointerNetParams) -> "AdamState":
        return cls({n: np.zeros_like(getattr(params, n)) for n in params.names()},
                   {n: np.zeros_like(getattr(params, n)) for n in params.names()})


def adam_step(params: PointerNetParams, grads: PointerNetParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> PointerNetParams:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    for name in params.names():
        if not np.all(np.isfinite(getattr(grads, name))):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    updated = {}
    for name in params.names():
        g = getattr(grads, name)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        updated[name] = getattr(params, name) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return PointerNetParams(**updated, reverse_input=params.reverse_input)


def apply_l2(grads: PointerNetParams, params: PointerNetParams, lam: float) -> PointerNetParams:
    """Add the gradient ``2 * lam * theta`` of the penalty ``lam * |theta|^2``."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if lam == 0:
        return grads
    return PointerNetParams(
        **{n: getattr(grads, n) + 2.0 * lam * getattr(params, n) for n in grads.names()},
        reverse_input=grads.reverse_input)


def l2_penalty(params: PointerNetParams, lam: float) -> float:
    return lam * float(sum((t * t).sum() for t in params.tensors()))


@dataclass
class EmaBaseline:
    decay: float = 0.99
    value: float = 0.0
    initialized: bool = False

    def current(self) -> Optional[float]:
        return self.value if self.initialized else None


def ema_update(baseline: EmaBaseline, observed: float) -> EmaBaseline:
    if not math.isfinite(observed):
        raise NumericError("baseline update with a non-finite value")
    if not baseline.initialized:
        baseline.value = float(observed)
        baseline.initialized = True
    else:
        baseline.value = baseline.decay * baseline.value + (1.0 - baseline.decay) * float(observed)
    return baseline


LOG_COLUMNS = ("step", "objective_value", "lr", "baseline", "wallclock_ms")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def to_tsv(self, wallclock: bool = True) -> str:
        cols = LOG_COLUMNS if wallclock else LOG_COLUMNS[:-1]
        lines = ["\t".join(cols)]
        for row in self.rows:
            lines.append("\t".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def train(dataset: Sequence[RankingInstance], config: TrainConfig, valid: Optional[Sequence[RankingInstance]] = None,
          log_path=None, checkpoint_path=None, feature_stats=None,
          init: Optional[PointerNetParams] = None):
    """Minibatch training; returns ``(params, TrainLog)``.

    Deterministic given the seed, the data and the config. Dropout and the L2
    penalty are applied for the supervised objective only.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    rng = make_rng(config.seed)
    m_raw = dataset[0].features.shape[1]
    m = config.proj_dim if config.proj_dim is not None else m_raw
    if init is None:
        params = init_params(m_raw, m, config.hidden_size, rng, projection=config.proj_dim is not None)
    else:
        params = init.copy()
    params.reverse_input = config.reverse_input
    adam = AdamState.for_params(params)
    baseline = EmaBaseline(config.baseline_decay)
    supervised = config.objective == "supervised"
    dropout = config.dropout if supervised else 0.0
    l2 = config.l2 if supervised else 0.0
    history = TrainLog()
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", encoding="utf-8")
        log_file.write("\t".join(LOG_COLUMNS) + "\n")
    start = time.perf_counter()
    step = 0
    try:
        while step < config.max_steps:
            order = rng.permutation(len(dataset))
            for lo in range(0, len(order), config.batch_size):
                if step >= config.max_steps:
                    break
                batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
                lr = config.lr_at(step)
                if supervised:
                    grad, value = supervised_gradient_batch(
                        params, batch, config.loss, baseline.current(), rng, dropout, config.onestep)
                    grad = apply_l2(grad, params, l2)
                else:
                    grad, value = reinforce_gradient_batch(
                        params, batch, config.reward, baseline.current(), rng)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite objective at step {step}: {value!r}")
                ema_update(baseline, value)
                params = adam_step(params, grad, adam, lr, config.beta1, config.beta2, config.eps)
                step += 1
                row = {"step": step, "objective_value": value, "lr": lr, "baseline": baseline.value,
                       "wallclock_ms": int((time.perf_counter() - start) * 1000)}
                history.rows.append(row)
                if log_file is not None:
                    log_file.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
                if config.eval_every and step % config.eval_every == 0:
                    if valid:
                        policy = (params, "onestep") if config.onestep else params
                        rep = evaluate(policy, valid, ks=(10,))
                        history.validation.append({"step": step, "ndcg@10": rep.ndcg[10], "map": rep.map})
                        log.info("step %d objective %.5f valid ndcg@10 %.4f", step, value, rep.ndcg[10])
                    if checkpoint_path is not None:
                        save_checkpoint(checkpoint_path, params, feature_stats)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, feature_stats)
    return params, history
