"""Cascade click simulation with diversity- or similarity-driven interactions.

A simulated user scans the base ranking top-down and observes the item at
rank ``i`` (1-based) with probability ``1 / i**eta``. What an observed item
receives depends on the mode:

* ``none``: relevant items are clicked.
* ``diverse``: a relevant item is clicked only if its distance to every
  previously clicked item exceeds the similarity threshold.
* ``similar``: relevant items are clicked, and irrelevant ones too when they
  lie within the threshold of some previously clicked item.

The threshold is the ``q``-quantile of the pairwise item distances within the
query. One uniform draw is consumed per item whatever happens, so runs that
differ only in ``eta`` see the same random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import RawQuery, base_order
from .model import RankingInstance

MODES = ("none", "diverse", "similar")


@dataclass
class CascadeConfig:
    eta: float = 0.0
    relevant_grades: frozenset = field(default_factory=lambda: frozenset({2, 3, 4}))
    q: float = 0.5
    mode: str = "diverse"

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError("q must be in (0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown click mode {self.mode!r}")
        self.relevant_grades = frozenset(int(g) for g in self.relevant_grades)


def _exact_distances(features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def similarity_threshold(features, q: float) -> float:
    """``q``-quantile (linear interpolation) of distances over unordered pairs."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("similarity_threshold needs at least two items")
    iu = np.triu_indices(n, k=1)
    return float(np.quantile(_exact_distances(X)[iu], q, method="linear"))


def simulate_clicks(features, grades, config: CascadeConfig, rng) -> np.ndarray:
    """Binary click vector for items given in base-rank order."""
    if grades is None:
        raise ValueError("click simulation needs relevance grades")
    X = np.asarray(features, dtype=np.float64)
    grades = np.asarray(grades).ravel()
    n = grades.shape[0]
    draws = rng.random(n)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    observed = draws < ranks ** (-config.eta)
    relevant = np.isin(grades, list(config.relevant_grades))
    clicks = np.zeros(n, dtype=np.int64)
    if config.mode == "none" or n < 2:
        clicks[observed & relevant] = 1
        return clicks
    D = _exact_distances(X)
    thr = similarity_threshold(X, config.q)
    clicked: list[int] = []
    for i in range(n):
        if not observed[i]:
            continue
        nearest = D[i, clicked].min() if clicked else np.inf
        if relevant[i]:
            hit = config.mode == "similar" or nearest > thr
        else:
            hit = config.mode == "similar" and nearest <= thr
        if hit:
            clicks[i] = 1
            clicked.append(i)
    return clicks


def generate_click_dataset(queries: Sequence[RawQuery], base_scores: Sequence, config: CascadeConfig, rng):
    """Order each query by its base scores and replace grades by simulated clicks.

    Returns ``(instances, stats)``; zero-click queries are kept and counted.
    """
    if len(base_scores) != len(queries):
        raise ValueError("need one base-score vector per query")
    instances = []
    clicks = items = zero = 0
    for query, scores in zip(queries, base_scores):
        scores = np.asarray(scores, dtype=np.float64).ravel()
        if scores.shape[0] != query.n:
            raise ValueError(f"query {query.qid}: base scores do not cover every item")
        order = base_order(scores)
        X = query.features[order]
        g = query.grades[order]
        y = simulate_clicks(X, g, config, rng)
        instances.append(RankingInstance(X, y, g, query.qid))
        clicks += int(y.sum())
        items += query.n
        zero += int(y.sum() == 0)
    num = len(queries)
    stats = {
        "num_queries": num,
        "clicks": clicks,
        "click_rate": clicks / items if items else 0.0,
        "zero_click_fraction": zero / num if num else 0.0,
    }
    return instances, stats
