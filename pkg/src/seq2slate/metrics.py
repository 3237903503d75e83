"""Ranking metrics on binary labels.

Per-query functions take a permutation (item indices, best first) and the
labels in input order. Queries without positives return ``None`` and are left
out of dataset averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


def _ranked_labels(perm, y) -> np.ndarray:
    return np.asarray(y)[np.asarray(perm, dtype=np.int64)]


def map_score(perm, y) -> Optional[float]:
    """Average precision of ``perm``."""
    rel = _ranked_labels(perm, y)
    npos = rel.sum()
    if npos == 0:
        return None
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float((hits / ranks)[rel == 1].sum() / npos)


def _dcg(rel: np.ndarray, k: int) -> float:
    rel = rel[:k]
    return float((rel / np.log2(np.arange(2, rel.size + 2))).sum())


def ndcg_at_k(perm, y, k: int) -> Optional[float]:
    """Binary-gain NDCG truncated at ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = _ranked_labels(perm, y)
    npos = int(rel.sum())
    if npos == 0:
        return None
    ideal = np.zeros(rel.size)
    ideal[:npos] = 1.0
    return _dcg(rel, k) / _dcg(ideal, k)


def rank_gain(perm, y) -> float:
    """Summed upward movement of positive items relative to the input order."""
    perm = np.asarray(perm, dtype=np.int64)
    y = np.asarray(y)
    new_pos = np.empty_like(perm)
    new_pos[perm] = np.arange(perm.size)
    pos = np.flatnonzero(y == 1)
    return float((pos - new_pos[pos]).sum())


def reward(perm, y, metric: str = "ndcg", k: int = 10) -> float:
    """Reward for policy-gradient training; zero-positive queries score 0."""
    if metric == "ndcg":
        value = ndcg_at_k(perm, y, k)
    elif metric == "map":
        value = map_score(perm, y)
    else:
        raise ValueError(f"unknown reward metric {metric!r}")
    return 0.0 if value is None else value


@dataclass
class MetricsReport:
    map: float
    ndcg: dict = field(default_factory=dict)
    rank_gain: float = 0.0
    num_queries: int = 0
    zero_click_fraction: float = 0.0

    def rows(self):
        yield ("map", "", self.map)
        for k in sorted(self.ndcg):
            yield ("ndcg", str(k), self.ndcg[k])
        yield ("rank_gain", "", self.rank_gain)
        yield ("num_queries", "", float(self.num_queries))
        yield ("zero_click_fraction", "", self.zero_click_fraction)

    def to_tsv(self) -> str:
        lines = ["metric\tk\tvalue"]
        lines += [f"{name}\t{k}\t{value:.6f}" for name, k, value in self.rows()]
        return "\n".join(lines) + "\n"


def report_from_permutations(perms: Iterable, labels: Iterable, ks=(5, 10)) -> MetricsReport:
    """Aggregate per-query metrics; labels must be in base order."""
    maps, gains, zero, count = [], [], 0, 0
    ndcgs = {k: [] for k in ks}
    for perm, y in zip(perms, labels):
        count += 1
        ap = map_score(perm, y)
        if ap is None:
            zero += 1
            continue
        maps.append(ap)
        gains.append(rank_gain(perm, y))
        for k in ks:
            ndcgs[k].append(ndcg_at_k(perm, y, k))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return MetricsReport(
        map=mean(maps),
        ndcg={k: mean(v) for k, v in ndcgs.items()},
        rank_gain=mean(gains),
        num_queries=count,
        zero_click_fraction=zero / count if count else 0.0,
    )


def evaluate(policy, instances, ks=(5, 10)) -> MetricsReport:
    """Evaluate a ranking policy on instances given in base order.

    ``policy`` is either a :class:`~seq2slate.model.PointerNetParams` (greedy
    sequential decoding), a ``(params, "onestep")`` pair, the string
    ``"noop"`` (keep the base order), or a callable mapping a list of
    instances to a list of permutations.
    """
    from .model import PointerNetParams, decode_batch

    instances = list(instances)
    if isinstance(policy, str) and policy == "noop":
        perms = [np.arange(inst.n) for inst in instances]
    elif isinstance(policy, PointerNetParams) or isinstance(policy, tuple):
        params, decoder = (policy, "seq") if isinstance(policy, PointerNetParams) else policy
        perms = [None] * len(instances)
        groups: dict = {}
        for idx, inst in enumerate(instances):
            groups.setdefault(inst.n, []).append(idx)
        for idxs in groups.values():
            for start in range(0, len(idxs), 512):
                chunk = idxs[start:start + 512]
                out = decode_batch(params, [instances[i] for i in chunk], decoder)
                for i, p in zip(chunk, out):
                    perms[i] = p
    else:
        perms = policy(instances)
    return report_from_permutations(perms, [inst.labels for inst in instances], ks)
