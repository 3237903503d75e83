"""Dataset handling: LETOR text I/O, base ordering, augmentation, synthetic data.

LETOR lines look like ``<grade> qid:<id> <fid>:<value> ... [# comment]``.
Feature ids are 1-based and may be sparse; missing ones read as 0. Click
datasets reuse the format with the grade column holding the binary label.
"""

from __future__ import annotations

import gzip
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import RankingInstance


class LetorFormatError(ValueError):
    pass


@dataclass
class RawQuery:
    qid: str
    features: np.ndarray
    grades: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.grades = np.asarray(self.grades, dtype=np.int64).ravel()
        if self.features.shape[0] < 1:
            raise ValueError(f"query {self.qid}: no items")
        if self.features.shape[0] != self.grades.shape[0]:
            raise ValueError(f"query {self.qid}: feature/grade count mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        return (isinstance(other, RawQuery) and self.qid == other.qid
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.grades, other.grades))


def parse_letor(stream: Iterable[str]) -> list[RawQuery]:
    """Group LETOR lines by qid, keeping file order within each query."""
    rows: dict = {}
    max_fid = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2 or not parts[1].startswith("qid:"):
            raise LetorFormatError(f"line {lineno}: expected '<grade> qid:<id> ...'")
        try:
            grade = int(float(parts[0]))
        except ValueError:
            raise LetorFormatError(f"line {lineno}: bad grade {parts[0]!r}") from None
        qid = parts[1][4:]
        if not qid:
            raise LetorFormatError(f"line {lineno}: empty qid")
        feats = {}
        for tok in parts[2:]:
            fid, sep, val = tok.partition(":")
            try:
                fid_i = int(fid)
                feats[fid_i] = float(val)
            except ValueError:
                raise LetorFormatError(f"line {lineno}: bad feature token {tok!r}") from None
            if not sep or fid_i < 1:
                raise LetorFormatError(f"line {lineno}: bad feature token {tok!r}")
            max_fid = max(max_fid, fid_i)
        rows.setdefault(qid, []).append((grade, feats))
    queries = []
    for qid, items in rows.items():
        X = np.zeros((len(items), max_fid))
        for r, (_, feats) in enumerate(items):
            for fid, val in feats.items():
                X[r, fid - 1] = val
        queries.append(RawQuery(qid, X, [g for g, _ in items]))
    return queries


def _open_text(path) -> io.TextIOBase:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def read_letor(path) -> list[RawQuery]:
    """Read a LETOR file; gzip compression is detected from the magic bytes."""
    with _open_text(path) as fh:
        return parse_letor(fh)


def format_letor(queries: Iterable[RawQuery]) -> str:
    out = []
    for q in queries:
        for grade, x in zip(q.grades, q.features):
            feats = " ".join(f"{k + 1}:{float(val)!r}" for k, val in enumerate(x))
            out.append(f"{int(grade)} qid:{q.qid} {feats}".rstrip())
    return "\n".join(out) + ("\n" if out else "")


def write_letor(path, queries: Iterable[RawQuery]) -> None:
    Path(path).write_text(format_letor(queries), encoding="utf-8", newline="\n")


def instances_to_queries(instances: Iterable[RankingInstance]) -> list[RawQuery]:
    """Click-labelled instances as LETOR queries (label in the grade column)."""
    return [RawQuery(inst.qid if inst.qid is not None else str(k), inst.features, inst.labels)
            for k, inst in enumerate(instances)]


def queries_to_instances(queries: Iterable[RawQuery]) -> list[RankingInstance]:
    """Read binary-labelled queries as instances, keeping file order as base order."""
    out = []
    for q in queries:
        if not np.isin(q.grades, (0, 1)).all():
            raise ValueError(f"query {q.qid}: labels must be 0/1 in a click dataset")
        out.append(RankingInstance(q.features, q.grades, qid=q.qid))
    return out


def base_order(scores) -> np.ndarray:
    """Indices by descending score, ties kept in original order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def order_by_base(query: RawQuery, base_scores, relevant_grades=None) -> RankingInstance:
    """Sort a query's items by base score and wrap them as an instance.

    Labels mark grades in ``relevant_grades``; with ``None`` any grade above 0
    counts as positive. Grades travel with the items.
    """
    scores = np.asarray(base_scores, dtype=np.float64).ravel()
    if scores.shape[0] != query.n:
        raise ValueError(f"query {query.qid}: {query.n} items but {scores.shape[0]} base scores")
    order = base_order(scores)
    grades = query.grades[order]
    if relevant_grades is None:
        labels = (grades > 0).astype(np.int64)
    else:
        labels = np.isin(grades, list(relevant_grades)).astype(np.int64)
    return RankingInstance(query.features[order], labels, grades, query.qid)


def shuffle_augment(instance: RankingInstance, copies: int, rng) -> list[RankingInstance]:
    """``copies`` independently shuffled versions of one instance."""
    if copies < 1:
        raise ValueError("copies must be >= 1")
    return [instance.reordered(rng.permutation(instance.n)) for _ in range(copies)]


@dataclass
class SynthConfig:
    num_queries: int = 1000
    n: int = 10
    m_raw: int = 16
    num_clusters: int = 3
    sigma: float = 0.2
    grade_noise: float = 0.3


def synth_queries(config: SynthConfig, rng) -> list[RawQuery]:
    """Clustered synthetic ranking data with graded relevance.

    Recipe, per query: draw ``num_clusters`` centers from N(0, I), assign each
    item to a uniformly chosen cluster and set its features to the center plus
    N(0, sigma^2 I) noise. A single utility direction ``u`` (unit vector drawn
    once per dataset) gives every item the score ``u . x + N(0, grade_noise^2)``;
    grades 0..4 come from cutting that score at -0.5, 0, 0.5 and 1. Items of one
    cluster are near-duplicates, so distance-based click rules bind, while the
    shared utility direction leaves a pointwise ranker something to learn.
    """
    if config.num_clusters < 2:
        raise ValueError("num_clusters must be >= 2")
    if config.n < 2:
        raise ValueError("n must be >= 2")
    u = rng.normal(size=config.m_raw)
    u /= np.linalg.norm(u)
    cuts = np.array([-0.5, 0.0, 0.5, 1.0])
    queries = []
    for q in range(config.num_queries):
        centers = rng.normal(size=(config.num_clusters, config.m_raw))
        assign = rng.integers(0, config.num_clusters, size=config.n)
        X = centers[assign] + config.sigma * rng.normal(size=(config.n, config.m_raw))
        util = X @ u + config.grade_noise * rng.normal(size=config.n)
        grades = np.searchsorted(cuts, util, side="right")
        queries.append(RawQuery(str(q + 1), X, grades))
    return queries


@dataclass
class FeatureStats:
    mean: np.ndarray
    scale: np.ndarray

    def as_tuple(self):
        return self.mean, self.scale


def fit_feature_stats(instances: Sequence, floor: float = 1e-6) -> FeatureStats:
    """Per-dimension mean and ``max(std, floor)`` over all items of the given split."""
    X = np.concatenate([inst.features for inst in instances], axis=0)
    return FeatureStats(X.mean(axis=0), np.maximum(X.std(axis=0), floor))


def normalize(instances: Sequence[RankingInstance], stats: FeatureStats) -> list[RankingInstance]:
    """Standardise features with (training-split) statistics."""
    return [RankingInstance((inst.features - stats.mean) / stats.scale, inst.labels, inst.grades, inst.qid)
            for inst in instances]


def split_of(qid: str, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> str:
    """Deterministic train/valid/test bucket from a seeded hash of the qid."""
    digest = hashlib.blake2b(f"{seed}:{qid}".encode(), digest_size=8).digest()
    x = int.from_bytes(digest, "little") / 2.0 ** 64
    if x < fractions[0]:
        return "train"
    if x < fractions[0] + fractions[1]:
        return "valid"
    return "test"


def split_queries(queries: Sequence, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict:
    out = {"train": [], "valid": [], "test": []}
    for q in queries:
        out[split_of(q.qid, seed, fractions)].append(q)
    return out


@dataclass
class LinearRanker:
    """Pointwise least-squares regression of grades on features."""

    weights: np.ndarray
    bias: float

    @classmethod
    def fit(cls, queries: Sequence[RawQuery], ridge: float = 1e-3) -> "LinearRanker":
        X = np.concatenate([q.features for q in queries], axis=0)
        y = np.concatenate([q.grades for q in queries]).astype(np.float64)
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        reg = ridge * np.eye(Xa.shape[1])
        reg[-1, -1] = 0.0
        coef = np.linalg.solve(Xa.T @ Xa + reg, Xa.T @ y)
        return cls(coef[:-1], float(coef[-1]))

    def score(self, query: RawQuery) -> np.ndarray:
        return query.features @ self.weights + self.bias


def read_base_scores(path, queries: Sequence[RawQuery]) -> list[np.ndarray]:
    """One score per LETOR line, in file order; the last token of each line is used.

    This accepts both plain score lists and RankLib's ``qid<TAB>index<TAB>score``
    output.
    """
    vals = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line.split()[-1]))
            except ValueError:
                raise LetorFormatError(f"{path}: line {lineno}: bad score {line!r}") from None
    need = sum(q.n for q in queries)
    if len(vals) != need:
        raise LetorFormatError(f"{path}: {len(vals)} scores for {need} items")
    out, pos = [], 0
    for q in queries:
        out.append(np.array(vals[pos:pos + q.n]))
        pos += q.n
    return out


@dataclass
class Dataset:
    instances: list
    stats: Optional[FeatureStats] = None
    meta: dict = field(default_factory=dict)
