"""Ranker heads: CLS readout, pooled twin ranker, MaxSim, and the two-ranker sum.

Every scorer takes batched inputs (leading axis B) and returns a [B] tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import MASK_VALUE, RepBundle
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass
class ClsRankerParams:
    weight: Tensor  # [h]
    bias: Tensor  # [1]

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, prefix: str = "cls_ranker.") -> "ClsRankerParams":
        w = rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden)
        return cls(Tensor(w, True, prefix + "weight"), Tensor(np.zeros(1), True, prefix + "bias"))

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class ResidualCombiner:
    """``F(x) + x`` with ``F(x) = act(W x + b)``; ``activation`` is "relu" or "affine"."""

    W: Tensor  # [h, h]
    b: Tensor  # [h]
    activation: str = "relu"

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, prefix: str = "combiner.",
             activation: str = "relu") -> "ResidualCombiner":
        W = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
        return cls(Tensor(W, True, prefix + "W"), Tensor(np.zeros(hidden), True, prefix + "b"), activation)

    def tensors(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[1]:
            raise ConfigError(f"combiner width {self.W.shape[1]} does not match input {x.shape}")
        f = T.linear(x, self.W, self.b)
        if self.activation == "relu":
            f = T.relu(f)
        elif self.activation != "affine":
            raise ConfigError(f"unknown combiner activation {self.activation!r}")
        return T.add(f, x)


@dataclass
class MaxSimParams:
    projection: Tensor  # [h, p]

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, dim: int | None = None,
             prefix: str = "maxsim.") -> "MaxSimParams":
        dim = dim or max(1, hidden // 2)
        P = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim))
        return cls(Tensor(P, True, prefix + "projection"))

    def tensors(self) -> list[Tensor]:
        return [self.projection]


@dataclass
class TwinRankerParams:
    residual: ResidualCombiner

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, prefix: str = "twin.",
             activation: str = "relu") -> "TwinRankerParams":
        return cls(ResidualCombiner.init(hidden, rng, prefix, activation))

    def tensors(self) -> list[Tensor]:
        return self.residual.tensors()


@dataclass
class ScoreBreakdown:
    s_mono: Tensor
    s_bi: Tensor
    s_total: Tensor

    def floats(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.s_mono.data, self.s_bi.data, self.s_total.data


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (T.reshape(x, (1,) + x.shape), True) if x.ndim == 1 else (x, False)


def cls_score(cls: Tensor, params: ClsRankerParams) -> Tensor:
    """dot(weight, cls) + bias; [h] -> [1], [B, h] -> [B]."""
    h = params.weight.shape[0]
    if cls.shape[-1] != h:
        raise ConfigError(f"CLS width {cls.shape[-1]} does not match ranker width {h}")
    x, _ = _batched(cls)
    out = T.linear(x, T.reshape(params.weight, (1, h)), params.bias)
    return T.reshape(out, (x.shape[0],))


def residual_combine(cls_q: Tensor, cls_d: Tensor, c: ResidualCombiner) -> Tensor:
    """Merge query and document CLS: x = max(cls_q, cls_d) elementwise, then F(x) + x."""
    if cls_q.shape != cls_d.shape:
        raise ConfigError(f"CLS widths differ: {cls_q.shape} vs {cls_d.shape}")
    x = T.max(T.stack([cls_q, cls_d], axis=0), axis=0)
    return c(x)


def _require_tokens(mask: np.ndarray, side: str) -> None:
    if mask.ndim != 2 or not np.all(mask.any(axis=1)):
        raise InputError(f"every {side} needs at least one unmasked token")


def maxsim_score(query_reps: Tensor, doc_reps: Tensor, query_mask: np.ndarray, doc_mask: np.ndarray,
                 params: MaxSimParams) -> Tensor:
    """Sum over query tokens of the best cosine match among document tokens."""
    query_mask = np.asarray(query_mask, dtype=bool)
    doc_mask = np.asarray(doc_mask, dtype=bool)
    _require_tokens(query_mask, "query")
    _require_tokens(doc_mask, "document")
    q = T.l2_normalize(T.matmul(query_reps, params.projection))
    d = T.l2_normalize(T.matmul(doc_reps, params.projection))
    sim = T.matmul(q, T.transpose(d, (0, 2, 1)))  # [B, Lq, Ld]
    sim = T.add_const(sim, np.where(doc_mask, 0.0, MASK_VALUE)[:, None, :])
    best = T.mul_const(T.max(sim, axis=2), query_mask.astype(np.float64))
    return T.sum(best, axis=1)


def masked_mean_pool(reps: Tensor, mask: np.ndarray) -> Tensor:
    counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
    summed = T.sum(T.mul_const(reps, mask[:, :, None].astype(np.float64)), axis=1)
    return T.mul_const(summed, 1.0 / counts)


def twin_score(query_reps: Tensor, doc_reps: Tensor, query_mask: np.ndarray, doc_mask: np.ndarray,
               params: TwinRankerParams) -> Tensor:
    """Cosine of the residual-transformed mean-pooled query and document vectors."""
    query_mask = np.asarray(query_mask, dtype=bool)
    doc_mask = np.asarray(doc_mask, dtype=bool)
    _require_tokens(query_mask, "query")
    _require_tokens(doc_mask, "document")
    q = T.l2_normalize(params.residual(masked_mean_pool(query_reps, query_mask)))
    d = T.l2_normalize(params.residual(masked_mean_pool(doc_reps, doc_mask)))
    return T.sum(T.mul(q, d), axis=1)


def bi_ranker_score(bundle: RepBundle, ranker) -> Tensor:
    args = (bundle.query_reps, bundle.doc_reps, bundle.query_mask, bundle.doc_mask, ranker)
    if isinstance(ranker, MaxSimParams):
        return maxsim_score(*args)
    if isinstance(ranker, TwinRankerParams):
        return twin_score(*args)
    raise ConfigError(f"unsupported bi ranker {type(ranker).__name__}")


def student_cls(bundle: RepBundle, combiner: ResidualCombiner | None) -> Tensor:
    """The CLS vector the mono ranker reads: joint CLS, or the combined pair in bi mode."""
    if bundle.mode == "cross":
        return bundle.cls_joint
    if combiner is None:
        raise ConfigError("bi-mode bundles need a residual combiner")
    return residual_combine(bundle.cls_query, bundle.cls_doc, combiner)


def trmd_score(bundle: RepBundle, cls_ranker: ClsRankerParams, combiner: ResidualCombiner | None,
               bi_ranker, cls_vec: Tensor | None = None) -> ScoreBreakdown:
    """Two-ranker score: s_total = s_mono + s_bi.

    ``cls_vec`` lets callers pass an already computed student CLS.
    """
    if cls_vec is None:
        cls_vec = student_cls(bundle, combiner)
    s_mono = cls_score(cls_vec, cls_ranker)
    s_bi = bi_ranker_score(bundle, bi_ranker)
    return ScoreBreakdown(s_mono, s_bi, T.add(s_mono, s_bi))
