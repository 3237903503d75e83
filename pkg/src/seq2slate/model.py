"""Pointer-network re-ranker: parameters, decoding policies and gradients.

The encoder LSTM reads the items in base-ranker order and produces one
memory state per item. The decoder LSTM starts from the encoder's final
state, is fed a learned ``go`` vector first and then the vector of each item
it has placed. At every step item ``i`` gets the score
``v . tanh(W_enc e_i + W_dec d_j)`` and a softmax over the items not yet
placed gives the pointing distribution.

Heavy lifting goes through :mod:`seq2slate.kernels`, which works on batches
of equally sized instances. ``encode`` and ``decode_step`` are a separate
single-instance numpy path used for enumeration and as a test oracle.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .numerics import NumericError, masked_softmax

CHECKPOINT_MAGIC = b"S2SL"
CHECKPOINT_VERSION = 1

# Fixed serialization and flattening order. ``proj`` is present only when the
# input projection is enabled.
TENSOR_ORDER = ("proj", "enc_W", "enc_b", "dec_W", "dec_b", "W_enc", "W_dec", "v", "go")

_FLAG_PROJ = 1
_FLAG_STATS = 2
_FLAG_REVERSE = 4


@dataclass
class PointerNetParams:
    """All learned tensors of the model.

    LSTM weights have shape ``(m + rho, 4 * rho)`` and act on the concatenated
    ``[input, h]`` row vector; gate blocks are ordered input, forget, output,
    cell candidate. The same container holds gradients.
    """

    enc_W: np.ndarray
    enc_b: np.ndarray
    dec_W: np.ndarray
    dec_b: np.ndarray
    W_enc: np.ndarray
    W_dec: np.ndarray
    v: np.ndarray
    go: np.ndarray
    proj: Optional[np.ndarray] = None
    reverse_input: bool = False

    def __post_init__(self):
        m, r = self.m, self.rho
        expect = {
            "enc_W": (m + r, 4 * r), "enc_b": (4 * r,),
            "dec_W": (m + r, 4 * r), "dec_b": (4 * r,),
            "W_enc": (r, r), "W_dec": (r, r), "v": (r,), "go": (m,),
        }
        if self.proj is not None:
            expect["proj"] = (self.proj.shape[0], m)
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")

    @property
    def rho(self) -> int:
        return self.W_enc.shape[0]

    @property
    def m(self) -> int:
        return self.go.shape[0]

    @property
    def m_raw(self) -> int:
        return self.m if self.proj is None else self.proj.shape[0]

    def names(self) -> list[str]:
        return [n for n in TENSOR_ORDER if getattr(self, n) is not None]

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, theta) -> "PointerNetParams":
        theta = np.asarray(theta, dtype=np.float64)
        out = {}
        pos = 0
        for name in self.names():
            t = getattr(self, name)
            out[name] = theta[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size
        if pos != theta.size:
            raise ValueError(f"flat vector has {theta.size} entries, expected {pos}")
        return PointerNetParams(**out, reverse_input=self.reverse_input)

    def map(self, fn) -> "PointerNetParams":
        return PointerNetParams(**{n: fn(getattr(self, n)) for n in self.names()},
                                reverse_input=self.reverse_input)

    def zeros_like(self) -> "PointerNetParams":
        return self.map(np.zeros_like)

    def copy(self) -> "PointerNetParams":
        return self.map(np.array)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())


@dataclass
class RankingInstance:
    """One query's candidates in base-ranker order (index 0 is the top item)."""

    features: np.ndarray
    labels: np.ndarray
    grades: Optional[np.ndarray] = None
    qid: Optional[str] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("RankingInstance needs at least one item")
        if self.labels.shape[0] != n:
            raise ValueError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        if self.grades is not None:
            self.grades = np.asarray(self.grades, dtype=np.int64).ravel()
            if self.grades.shape[0] != n:
                raise ValueError("grades length does not match item count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def reordered(self, order) -> "RankingInstance":
        order = np.asarray(order, dtype=np.int64)
        return RankingInstance(
            self.features[order], self.labels[order],
            None if self.grades is None else self.grades[order], self.qid)


@dataclass
class DecodeTrace:
    permutation: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    log_prob: float


@dataclass
class EncoderMemory:
    states: np.ndarray
    h: np.ndarray
    c: np.ndarray


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray


# -- single-instance reference path -------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell(W, b, u, h, c):
    r = h.shape[0]
    z = np.concatenate([u, h]) @ W + b
    i, f, o = _sigmoid(z[:r]), _sigmoid(z[r:2 * r]), _sigmoid(z[2 * r:3 * r])
    g = np.tanh(z[3 * r:])
    c = f * c + i * g
    return o * np.tanh(c), c


def project(params: PointerNetParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.m_raw:
        raise ValueError(f"feature length {x.shape[-1]} does not match model input size {params.m_raw}")
    return x if params.proj is None else x @ params.proj


def encode(params: PointerNetParams, instance: RankingInstance) -> EncoderMemory:
    """Run the encoder over the items in the order given."""
    x = project(params, instance.features)
    r = params.rho
    h, c = np.zeros(r), np.zeros(r)
    states = np.empty((instance.n, r))
    for i in range(instance.n):
        h, c = lstm_cell(params.enc_W, params.enc_b, x[i], h, c)
        states[i] = h
    return EncoderMemory(states, h, c)


def initial_decoder_state(memory: EncoderMemory) -> DecoderState:
    return DecoderState(memory.h.copy(), memory.c.copy())


def decoder_input(params: PointerNetParams, instance: RankingInstance, item: Optional[int]) -> np.ndarray:
    """``go`` for the first step, else the projected vector of ``item``."""
    if item is None:
        return params.go
    return project(params, instance.features[item])


def decode_step(params: PointerNetParams, memory: EncoderMemory, state: DecoderState,
                inp, excluded=()):
    """Feed ``inp`` to the decoder and point at the remaining items.

    Returns ``(scores, probs, new_state)``.
    """
    h, c = lstm_cell(params.dec_W, params.dec_b, np.asarray(inp, dtype=np.float64), state.h, state.c)
    pre = memory.states @ params.W_enc.T + params.W_dec @ h
    scores = np.tanh(pre) @ params.v
    probs = masked_softmax(scores, excluded)
    return scores, probs, DecoderState(h, c)


# -- batched kernel path ------------------------------------------------------------

@dataclass
class BatchForward:
    scores: np.ndarray
    perm: np.ndarray
    cache: dict
    X: np.ndarray
    enc_mask: Optional[np.ndarray]
    reverse: bool
    n_steps: int


def _stack(instances: Sequence[RankingInstance]) -> np.ndarray:
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("batched kernels need instances of equal size")
    return np.stack([inst.features for inst in instances])


def forward_batch(params: PointerNetParams, X, mode: int, perm=None, rng=None,
                  n_steps: Optional[int] = None, dropout: float = 0.0) -> BatchForward:
    """Run encoder and decoder over a batch ``X`` of shape ``(B, n, m_raw)``.

    ``mode`` is one of ``kernels.FORCED`` (decode the given ``perm``),
    ``kernels.GREEDY`` or ``kernels.SAMPLE`` (needs ``rng``). Dropout masks
    are drawn from ``rng`` when ``dropout > 0``.
    """
    X = np.asarray(X, dtype=np.float64)
    B, n, _ = X.shape
    T = n if n_steps is None else int(n_steps)
    m = params.m
    rev = params.reverse_input
    if rev:
        X = X[:, ::-1]
        if perm is not None:
            perm = n - 1 - np.asarray(perm)
    Xp = project(params, X)
    enc_mask = None
    if dropout > 0.0:
        keep = 1.0 - dropout
        enc_mask = (rng.random((B, n, m)) < keep) / keep
        dec_mask = (rng.random((B, T, m)) < keep) / keep
        Xe = Xp * enc_mask
    else:
        dec_mask = np.ones((B, T, m))
        Xe = Xp
    uniforms = rng.random((B, n)) if mode == kernels.SAMPLE else None
    S, out_perm, cache = kernels.forward(
        Xe, Xp, params.go, dec_mask, params.enc_W, params.enc_b, params.dec_W, params.dec_b,
        params.W_enc, params.W_dec, params.v, mode, perm, uniforms, T)
    if not np.all(np.isfinite(S)):
        raise NumericError("non-finite scores in forward pass")
    if rev:
        S = S[:, :, ::-1]
        out_perm = out_perm.copy()
        out_perm[:, :T] = n - 1 - out_perm[:, :T]
    return BatchForward(S, out_perm, cache, X, enc_mask, rev, T)


def backward_batch(params: PointerNetParams, fwd: BatchForward, dS) -> PointerNetParams:
    """Batch-summed parameter gradient of ``sum(dS * scores)``."""
    dS = np.asarray(dS, dtype=np.float64)
    if fwd.reverse:
        dS = dS[:, :, ::-1]
    g = kernels.backward(fwd.cache, dS, params.enc_W, params.dec_W, params.W_enc, params.W_dec, params.v)
    out = dict(enc_W=g["We"], enc_b=g["be"], dec_W=g["Wd"], dec_b=g["bd"],
               W_enc=g["Wenc"], W_dec=g["Wdec"], v=g["v"], go=g["go"])
    if params.proj is not None:
        dXe = g["dXe"] if fwd.enc_mask is None else g["dXe"] * fwd.enc_mask
        dXp = dXe + g["dXd"]
        out["proj"] = np.einsum("bnr,bnm->rm", fwd.X, dXp)
    return PointerNetParams(**out, reverse_input=params.reverse_input)


def step_masks(perm, n_steps: int, n: int) -> np.ndarray:
    """Boolean ``(..., T, n)`` array: True where an item was placed before step j."""
    perm = np.asarray(perm)
    lead = perm.shape[:-1]
    masks = np.zeros(lead + (n_steps, n), dtype=bool)
    for j in range(1, n_steps):
        masks[..., j, :] = masks[..., j - 1, :]
        np.put_along_axis(masks[..., j, :], perm[..., j - 1:j], True, axis=-1)
    return masks


def step_probs(S, masks) -> np.ndarray:
    """Masked softmax of every decoder step, vectorised."""
    live = ~masks
    top = np.max(np.where(live, S, -np.inf), axis=-1, keepdims=True)
    e = np.where(live, np.exp(np.where(live, S - top, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def log_prob_grad_scores(S, perm, masks):
    """Log-probability of ``perm`` and its gradient w.r.t. the scores."""
    P = step_probs(S, masks)
    T = S.shape[-2]
    chosen = np.asarray(perm)[..., :T]
    picked = np.take_along_axis(P, chosen[..., None], axis=-1)[..., 0]
    logp = np.log(picked).sum(axis=-1)
    dS = -P
    onehot = np.zeros_like(S)
    np.put_along_axis(onehot, chosen[..., None], 1.0, axis=-1)
    dS = np.where(masks, 0.0, dS + onehot)
    return logp, dS, P


def _trace(S, perm, masks) -> DecodeTrace:
    logp, _, P = log_prob_grad_scores(S, perm, masks)
    return DecodeTrace(np.asarray(perm).copy(), S, P, float(logp))


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64).ravel()
    if perm.shape[0] != n or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm


def decode_greedy(params: PointerNetParams, instance: RankingInstance) -> DecodeTrace:
    """Pick the most probable remaining item at each step (lowest index on ties)."""
    fwd = forward_batch(params, instance.features[None], kernels.GREEDY)
    perm = fwd.perm[0]
    return _trace(fwd.scores[0], perm, step_masks(perm, instance.n, instance.n))


def decode_sample(params: PointerNetParams, instance: RankingInstance, rng) -> DecodeTrace:
    """Draw each position from the model's conditional distribution."""
    fwd = forward_batch(params, instance.features[None], kernels.SAMPLE, rng=rng)
    perm = fwd.perm[0]
    return _trace(fwd.scores[0], perm, step_masks(perm, instance.n, instance.n))


def decode_forced(params: PointerNetParams, instance: RankingInstance, perm) -> DecodeTrace:
    """Teacher-forced trace of a fixed permutation."""
    perm = _check_perm(perm, instance.n)
    fwd = forward_batch(params, instance.features[None], kernels.FORCED, perm=perm[None])
    return _trace(fwd.scores[0], perm, step_masks(perm, instance.n, instance.n))


def onestep_scores(params: PointerNetParams, instance: RankingInstance) -> np.ndarray:
    fwd = forward_batch(params, instance.features[None], kernels.GREEDY, n_steps=1)
    return fwd.scores[0, 0]


def sort_by_scores(s) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(s), kind="stable")


def decode_onestep(params: PointerNetParams, instance: RankingInstance) -> np.ndarray:
    """Single decoder step from ``go``; items sorted by its scores."""
    return sort_by_scores(onestep_scores(params, instance))


def decode_batch(params: PointerNetParams, instances: Sequence[RankingInstance],
                 decoder: str = "seq") -> list[np.ndarray]:
    """Greedy (``seq``) or one-step permutations for equally sized instances."""
    X = _stack(instances)
    if decoder == "seq":
        return list(forward_batch(params, X, kernels.GREEDY).perm)
    if decoder == "onestep":
        fwd = forward_batch(params, X, kernels.GREEDY, n_steps=1)
        return [sort_by_scores(s) for s in fwd.scores[:, 0]]
    raise ValueError(f"unknown decoder {decoder!r}")


def log_prob_and_grad(params: PointerNetParams, instance: RankingInstance, perm):
    """``log p(perm | x)`` under teacher forcing and its parameter gradient."""
    perm = _check_perm(perm, instance.n)
    fwd = forward_batch(params, instance.features[None], kernels.FORCED, perm=perm[None])
    masks = step_masks(perm[None], instance.n, instance.n)
    logp, dS, _ = log_prob_grad_scores(fwd.scores, perm[None], masks)
    return float(logp[0]), backward_batch(params, fwd, dS)


def sequence_loss_and_grad(params: PointerNetParams, instance: RankingInstance, perm, loss_config):
    """Weighted sequence loss of a fixed permutation and its parameter gradient."""
    from .losses import sequence_loss_with_grad

    perm = _check_perm(perm, instance.n)
    fwd = forward_batch(params, instance.features[None], kernels.FORCED, perm=perm[None])
    loss, dS = sequence_loss_with_grad(fwd.scores[0], instance.labels, perm, loss_config)
    return loss, backward_batch(params, fwd, dS[None])


def sequence_loss_forced(params: PointerNetParams, instance: RankingInstance, perm, loss_config) -> float:
    """Value of :func:`sequence_loss_and_grad` without the backward pass."""
    from .losses import sequence_loss

    perm = _check_perm(perm, instance.n)
    fwd = forward_batch(params, instance.features[None], kernels.FORCED, perm=perm[None])
    return sequence_loss(fwd.scores[0], instance.labels, perm, loss_config)


# -- checkpoint I/O -----------------------------------------------------------------

def _pack_tensor(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8").ravel()
    return struct.pack("<Q", data.size) + data.tobytes()


def checkpoint_bytes(params: PointerNetParams, feature_stats=None) -> bytes:
    """Serialize to the binary checkpoint layout.

    ``"S2SL"``, u32 version, u32 m_raw, u32 m, u32 rho, u32 flags
    (1 = projection, 2 = feature stats, 4 = reversed input), then each tensor
    of :data:`TENSOR_ORDER` that is present as a u64 element count followed by
    little-endian float64 values, then feature mean and scale if flagged, and
    finally the CRC32 of everything before it as u32. All integers are
    little-endian.
    """
    flags = 0
    if params.proj is not None:
        flags |= _FLAG_PROJ
    if feature_stats is not None:
        flags |= _FLAG_STATS
    if params.reverse_input:
        flags |= _FLAG_REVERSE
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IIIII", CHECKPOINT_VERSION, params.m_raw, params.m, params.rho, flags)
    for t in params.tensors():
        out += _pack_tensor(t)
    if feature_stats is not None:
        if hasattr(feature_stats, "as_tuple"):
            feature_stats = feature_stats.as_tuple()
        mean, scale = feature_stats
        out += _pack_tensor(mean)
        out += _pack_tensor(scale)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def checkpoint_from_bytes(blob: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(params, feature_stats)``."""
    if len(blob) < 28 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a seq2slate checkpoint")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint CRC mismatch")
    version, m_raw, m, rho, flags = struct.unpack("<IIIII", blob[4:24])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 24

    def take(shape):
        nonlocal pos
        (count,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        if count != int(np.prod(shape)):
            raise ValueError(f"tensor size {count} does not match expected shape {shape}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr.reshape(shape)

    shapes = {
        "proj": (m_raw, m), "enc_W": (m + rho, 4 * rho), "enc_b": (4 * rho,),
        "dec_W": (m + rho, 4 * rho), "dec_b": (4 * rho,), "W_enc": (rho, rho),
        "W_dec": (rho, rho), "v": (rho,), "go": (m,),
    }
    tensors = {}
    for name in TENSOR_ORDER:
        if name == "proj" and not flags & _FLAG_PROJ:
            continue
        tensors[name] = take(shapes[name])
    stats = None
    if flags & _FLAG_STATS:
        stats = (take((m_raw,)), take((m_raw,)))
    if pos != len(blob) - 4:
        raise ValueError("trailing bytes in checkpoint")
    params = PointerNetParams(**tensors, reverse_input=bool(flags & _FLAG_REVERSE))
    return params, stats


def save_checkpoint(path, params: PointerNetParams, feature_stats=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, feature_stats))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
