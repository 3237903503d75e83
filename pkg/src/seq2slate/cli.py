"""``seq2slate`` command line: synth, simulate, train, eval, rerank, verify.

Settings come from an optional flat ``key = value`` config file (``#``
starts a comment) and are overridden by command-line flags. Every run prints
its fully resolved config to stderr.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .clickgen import MODES, CascadeConfig, generate_click_dataset
from .data import (
    FeatureStats,
    LetorFormatError,
    LinearRanker,
    SynthConfig,
    fit_feature_stats,
    instances_to_queries,
    normalize,
    queries_to_instances,
    read_base_scores,
    read_letor,
    synth_queries,
    write_letor,
)
from .losses import LossConfig, RewardConfig
from .metrics import evaluate
from .model import CHECKPOINT_VERSION, RankingInstance, decode_batch, load_checkpoint
from .numerics import NumericError, make_rng
from .optim import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4

log = logging.getLogger("seq2slate")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Every settable key. Names double as config-file keys and ``--flag-names``."""

    # files
    data: Optional[str] = None
    valid: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    checkpoint: Optional[str] = None
    base_scores: str = "builtin"
    log: Optional[str] = None
    # synthetic data
    num_queries: int = 1000
    n: int = 10
    m_raw: int = 16
    num_clusters: int = 3
    sigma: float = 0.2
    grade_noise: float = 0.3
    # clicks
    mode: str = "diverse"
    eta: float = 0.0
    q: float = 0.5
    relevant_grades: str = "2,3,4"
    # training
    objective: str = "xent"
    policy: str = "sample"
    weights: str = "uniform"
    topk: int = 0
    gamma: float = 1.0
    smooth_outer: bool = False
    reward_metric: str = "ndcg"
    reward_k: int = 10
    onestep: bool = False
    shuffle_augment: int = 0
    reverse_input: bool = False
    batch_size: int = 128
    hidden_size: int = 128
    proj_dim: int = 0
    lr: float = 3e-4
    decay_every: int = 1000
    decay_factor: float = 0.96
    l2: float = 3e-4
    dropout: float = 0.1
    baseline_decay: float = 0.99
    steps: int = 1000
    eval_every: int = 0
    seed: int = 0
    # evaluation / verification
    ks: str = "5,10"
    decoder: str = "seq"
    suite: str = "all"
    draws: int = 200_000


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
OBJECTIVES = ("xent", "hinge", "smooth-hinge", "reinforce")


def _convert(key: str, raw: str):
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; unknown keys and malformed lines are usage errors."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, value)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then ``S2SL_SEED``, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    if "seed" not in values and os.environ.get("S2SL_SEED"):
        values["seed"] = _convert("seed", os.environ["S2SL_SEED"])
    for key in FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


def print_config(cfg: RunConfig, command: str) -> None:
    sys.stderr.write(f"# seq2slate {command} checkpoint_version={CHECKPOINT_VERSION} backend={kernels.BACKEND}\n")
    for f in fields(RunConfig):
        sys.stderr.write(f"# {f.name} = {getattr(cfg, f.name)}\n")


def _parse_ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise UsageError(f"bad --ks value {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--ks needs positive integers")
    return ks


def _require(cfg: RunConfig, *keys) -> None:
    missing = [k for k in keys if getattr(cfg, k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _read_queries(path):
    try:
        return read_letor(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except LetorFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_instances(path) -> list:
    queries = _read_queries(path)
    try:
        return queries_to_instances(queries)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- commands ---------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "output")
    synth = SynthConfig(cfg.num_queries, cfg.n, cfg.m_raw, cfg.num_clusters, cfg.sigma, cfg.grade_noise)
    write_letor(cfg.output, synth_queries(synth, make_rng(cfg.seed)))
    return EXIT_OK


def cascade_config(cfg: RunConfig) -> CascadeConfig:
    if cfg.mode not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    try:
        grades = frozenset(int(g) for g in cfg.relevant_grades.split(",") if g.strip())
        return CascadeConfig(cfg.eta, grades, cfg.q, cfg.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(cfg: RunConfig) -> int:
    _require(cfg, "input", "output")
    clicks = cascade_config(cfg)
    queries = _read_queries(cfg.input)
    if cfg.base_scores == "builtin":
        ranker = LinearRanker.fit(queries)
        scores = [ranker.score(q) for q in queries]
    else:
        try:
            scores = read_base_scores(cfg.base_scores, queries)
        except OSError as exc:
            raise DataError(f"cannot read {cfg.base_scores}: {exc}") from None
        except LetorFormatError as exc:
            raise DataError(str(exc)) from None
    instances, stats = generate_click_dataset(queries, scores, clicks, make_rng(cfg.seed))
    write_letor(cfg.output, instances_to_queries(instances))
    sidecar = Path(str(cfg.output) + ".stats.tsv")
    sidecar.write_text("".join(f"{k}\t{v}\n" for k, v in stats.items()), encoding="utf-8")
    return EXIT_OK


def train_config(cfg: RunConfig) -> TrainConfig:
    if cfg.objective not in OBJECTIVES:
        raise UsageError(f"--objective must be one of {', '.join(OBJECTIVES)}")
    try:
        loss = LossConfig(
            family="xent" if cfg.objective == "reinforce" else cfg.objective.replace("-", "_"),
            gamma=cfg.gamma, weight_scheme=cfg.weights, k=cfg.topk or None,
            policy=cfg.policy, smooth_outer=cfg.smooth_outer)
        return TrainConfig(
            batch_size=cfg.batch_size, lr0=cfg.lr, decay_every=cfg.decay_every, decay_factor=cfg.decay_factor,
            l2=cfg.l2, dropout=cfg.dropout, baseline_decay=cfg.baseline_decay, max_steps=cfg.steps,
            eval_every=cfg.eval_every, seed=cfg.seed,
            objective="reinforce" if cfg.objective == "reinforce" else "supervised",
            loss=loss, reward=RewardConfig(cfg.reward_metric, cfg.reward_k), hidden_size=cfg.hidden_size,
            proj_dim=cfg.proj_dim or None, onestep=cfg.onestep, reverse_input=cfg.reverse_input)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "output")
    tcfg = train_config(cfg)
    raw = _read_instances(cfg.data)
    stats = fit_feature_stats(raw)
    instances = normalize(raw, stats)
    if cfg.shuffle_augment:
        rng = make_rng(cfg.seed + 1)
        instances = [inst.reordered(rng.permutation(inst.n))
                     for inst in instances for _ in range(cfg.shuffle_augment)]
    valid = normalize(_read_instances(cfg.valid), stats) if cfg.valid else None
    log_path = cfg.log or str(cfg.output) + ".log.tsv"
    train(instances, tcfg, valid=valid, log_path=log_path, checkpoint_path=cfg.output,
          feature_stats=stats.as_tuple())
    return EXIT_OK


def _load_model(path):
    try:
        params, stats = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return params, (FeatureStats(*stats) if stats is not None else None)


def _prepare(instances, params, stats, path) -> list:
    for inst in instances:
        if inst.features.shape[1] != params.m_raw:
            raise DataError(f"{path}: query {inst.qid} has {inst.features.shape[1]} features, "
                            f"the checkpoint expects {params.m_raw}")
    return normalize(instances, stats) if stats is not None else instances


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "data")
    ks = _parse_ks(cfg.ks)
    if cfg.decoder not in ("seq", "onestep", "noop"):
        raise UsageError("--decoder must be seq, onestep or noop")
    instances = _read_instances(cfg.data)
    if cfg.decoder == "noop":
        policy = "noop"
    else:
        _require(cfg, "checkpoint")
        params, stats = _load_model(cfg.checkpoint)
        instances = _prepare(instances, params, stats, cfg.data)
        policy = (params, "onestep") if cfg.decoder == "onestep" else params
    sys.stdout.write(evaluate(policy, instances, ks).to_tsv())
    return EXIT_OK


def cmd_rerank(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "input", "output")
    params, stats = _load_model(cfg.checkpoint)
    queries = _read_queries(cfg.input)
    instances = _prepare([RankingInstance(q.features, np.zeros(q.n, dtype=np.int64), qid=q.qid) for q in queries],
                         params, stats, cfg.input)
    decoder = "onestep" if cfg.decoder == "onestep" else "seq"
    perms = decode_batch(params, instances, decoder=decoder)
    lines = [f"{q.qid}: " + " ".join(str(int(i) + 1) for i in perm) for q, perm in zip(queries, perms)]
    Path(cfg.output).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import SUITES

    names = list(SUITES) if cfg.suite == "all" else [cfg.suite]
    if any(name not in SUITES for name in names):
        raise UsageError(f"--suite must be one of {', '.join(SUITES)} or all")
    ok = True
    sys.stdout.write("suite\tcheck\tvalue\tthreshold\tresult\n")
    for name in names:
        for check in SUITES[name](cfg.draws):
            sys.stdout.write(check.tsv() + "\n")
            sys.stdout.flush()
            ok &= check.passed
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "synth": (cmd_synth, ("output", "num_queries", "n", "m_raw", "num_clusters", "sigma", "grade_noise", "seed")),
    "simulate": (cmd_simulate, ("input", "base_scores", "mode", "eta", "q", "relevant_grades", "seed", "output")),
    "train": (cmd_train, ("data", "valid", "objective", "policy", "weights", "topk", "gamma", "smooth_outer",
                          "reward_metric", "reward_k", "onestep", "shuffle_augment", "reverse_input", "batch_size",
                          "hidden_size", "proj_dim", "lr", "decay_every", "decay_factor", "l2", "dropout",
                          "baseline_decay", "steps", "eval_every", "seed", "log", "output")),
    "eval": (cmd_eval, ("data", "checkpoint", "ks", "decoder")),
    "rerank": (cmd_rerank, ("checkpoint", "input", "output", "decoder")),
    "verify": (cmd_verify, ("suite", "draws")),
}


HELP = {
    "synth": "write a synthetic graded LETOR dataset",
    "simulate": "turn graded data into cascade click data",
    "train": "train a model and write a checkpoint plus a training log",
    "eval": "print a metrics table for a checkpoint or the base order",
    "rerank": "write re-ranked item positions for every query",
    "verify": "run the gradient, oracle and estimator self-checks",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seq2slate", description="Pointer-network slate re-ranking.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="flat key = value config file")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            kind = FIELD_TYPES[key]
            if kind == "bool":
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                conv = {"int": int, "float": float}.get(kind, str)
                p.add_argument(flag, dest=key, type=conv, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print_config(cfg, args.command)
        return COMMANDS[args.command][0](cfg)
    except UsageError as exc:
        sys.stderr.write(f"seq2slate: usage error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(f"seq2slate: data error: {exc}\n")
        return EXIT_DATA
    except NumericError as exc:
        sys.stderr.write(f"seq2slate: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
