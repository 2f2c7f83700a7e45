"""Ranking models: an encoder plus one or two ranker heads.

Kinds:
    mono_cross  cross encoder + CLS ranker (cross-encoder teacher)
    twin_bi     bi encoder + pooled twin ranker
    colbert_bi  bi encoder + MaxSim ranker
    trmd / tr   two-ranker student (CLS ranker + twin or MaxSim), bi or cross
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, EncoderParams, RepBundle, TextReps, encode_bi, encode_bi_batch,
                      encode_cross_batch, fit_cross, pair_bi)
from .errors import ConfigError
from .rankers import (ClsRankerParams, MaxSimParams, ResidualCombiner, ScoreBreakdown, TwinRankerParams,
                      bi_ranker_score, cls_score, student_cls, trmd_score)
from .tensor import Tensor

TEACHER_KINDS = ("mono_cross", "twin_bi", "colbert_bi")
STUDENT_KINDS = ("trmd", "tr")


@dataclass
class ModelConfig:
    kind: str
    encoder: EncoderConfig
    encoder_mode: str = "bi"
    bi_ranker: str | None = None
    combiner_activation: str = "relu"
    maxsim_dim: int | None = None

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.kind == "mono_cross":
            self.encoder_mode, self.bi_ranker = "cross", None
        elif self.kind == "twin_bi":
            self.encoder_mode, self.bi_ranker = "bi", "twin"
        elif self.kind == "colbert_bi":
            self.encoder_mode, self.bi_ranker = "bi", "colbert"
        elif self.kind in STUDENT_KINDS:
            if self.encoder_mode not in ("bi", "cross"):
                raise ConfigError(f"student encoder_mode must be bi or cross, got {self.encoder_mode!r}")
            if self.bi_ranker not in ("twin", "colbert"):
                raise ConfigError(f"student bi_ranker must be twin or colbert, got {self.bi_ranker!r}")
        else:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.maxsim_dim is None:
            self.maxsim_dim = max(1, self.encoder.hidden // 2)
        self.encoder.validate()

    @property
    def is_student(self) -> bool:
        return self.kind in STUDENT_KINDS

    @property
    def uses_cls_ranker(self) -> bool:
        return self.kind == "mono_cross" or self.is_student

    def to_dict(self) -> dict:
        return asdict(self)


class RankingModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h = config.encoder.hidden
        self.encoder = EncoderParams.init(config.encoder, rng)
        self.cls_ranker = self.combiner = self.maxsim = self.twin = None
        if config.uses_cls_ranker:
            self.cls_ranker = ClsRankerParams.init(h, rng)
        if config.is_student and config.encoder_mode == "bi":
            self.combiner = ResidualCombiner.init(h, rng, activation=config.combiner_activation)
        if config.bi_ranker == "colbert":
            self.maxsim = MaxSimParams.init(h, rng, config.maxsim_dim)
        elif config.bi_ranker == "twin":
            self.twin = TwinRankerParams.init(h, rng, activation=config.combiner_activation)

    # -- parameters ---------------------------------------------------------

    def head_tensors(self) -> list[Tensor]:
        out = []
        for part in (self.cls_ranker, self.combiner, self.maxsim, self.twin):
            if part is not None:
                out.extend(part.tensors())
        return out

    def encoder_tensors(self) -> list[Tensor]:
        return list(self.encoder.tensors.values())

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.encoder_tensors() + self.head_tensors()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(snap) != set(params):
            raise ConfigError("snapshot parameter names do not match the model")
        for name, t in params.items():
            if snap[name].shape != t.shape:
                raise ConfigError(f"parameter {name}: shape {snap[name].shape} != {t.shape}")
            t.data = np.array(snap[name], dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone(self) -> "RankingModel":
        return copy.deepcopy(self)

    @property
    def bi_ranker(self):
        return self.maxsim if self.maxsim is not None else self.twin

    # -- representations ----------------------------------------------------

    def represent(self, queries: Sequence[Sequence[int]], docs: Sequence[Sequence[int]],
                  rng: np.random.Generator | None = None) -> RepBundle:
        """Padded batch of (query, document) pairs in this model's wiring."""
        if self.config.encoder_mode == "cross":
            return encode_cross_batch(list(zip(queries, docs)), self.encoder, rng)
        q = encode_bi_batch(queries, self.encoder, "query", rng)
        d = encode_bi_batch(docs, self.encoder, "document", rng)
        return pair_bi(q, d)

    def student_cls(self, bundle: RepBundle) -> Tensor:
        return student_cls(bundle, self.combiner)

    def score_bundle(self, bundle: RepBundle, cls_vec: Tensor | None = None) -> tuple[Tensor, ScoreBreakdown | None]:
        """Total score [B] plus the two-ranker breakdown for students."""
        kind = self.config.kind
        if self.config.is_student:
            br = trmd_score(bundle, self.cls_ranker, self.combiner, self.bi_ranker, cls_vec)
            return br.s_total, br
        if kind == "mono_cross":
            return cls_score(bundle.cls_joint, self.cls_ranker), None
        return bi_ranker_score(bundle, self.bi_ranker), None

    # -- inference ------------------------------------------------------------

    def fit_doc(self, doc_ids: Sequence[int]) -> list[int]:
        """Truncate a document to what the bi wiring can hold."""
        return list(doc_ids)[: self.config.encoder.max_len - 2]

    def score_pairs(self, query_ids: Sequence[int], docs: Sequence[Sequence[int]],
                    chunk: int = 128) -> np.ndarray:
        """Score one query against many documents with padded batches (fast path)."""
        docs = list(docs)
        if not docs:
            return np.zeros(0)
        if self.config.encoder_mode == "cross":
            out = []
            for i in range(0, len(docs), chunk):
                part = docs[i : i + chunk]
                bundle = self.represent([query_ids] * len(part), part)
                out.append(self.score_bundle(bundle)[0].data)
            return np.concatenate(out)
        q = encode_bi_batch([query_ids], self.encoder, "query")
        out = []
        for i in range(0, len(docs), chunk):
            part = [self.fit_doc(d) for d in docs[i : i + chunk]]
            d = encode_bi_batch(part, self.encoder, "document")
            n = len(part)
            qtile = TextReps(Tensor(np.repeat(q.cls.data, n, 0)), Tensor(np.repeat(q.tokens.data, n, 0)),
                             np.repeat(q.mask, n, 0))
            out.append(self.score_bundle(pair_bi(qtile, d))[0].data)
        return np.concatenate(out)

    def encode_query(self, query_ids: Sequence[int]) -> TextReps:
        self._require_bi()
        return encode_bi(query_ids, self.encoder, "query")

    def encode_doc(self, doc_ids: Sequence[int]) -> TextReps:
        self._require_bi()
        return encode_bi(self.fit_doc(doc_ids), self.encoder, "document")

    def score_encoded(self, query: TextReps, doc: TextReps) -> tuple[float, ScoreBreakdown | None]:
        """Score one pre-encoded (query, document) pair; batch of one, no padding."""
        total, br = self.score_bundle(pair_bi(query, doc))
        return float(total.data[0]), br

    def score_fresh(self, query_ids: Sequence[int], doc_ids: Sequence[int]) -> float:
        """Full two-pass forward for one pair (reference path for stored reps)."""
        if self.config.encoder_mode == "cross":
            q, d = fit_cross(query_ids, doc_ids, self.config.encoder.max_len)
            return float(self.score_bundle(self.represent([q], [d]))[0].data[0])
        return self.score_encoded(self.encode_query(query_ids), self.encode_doc(doc_ids))[0]

    def _require_bi(self) -> None:
        if self.config.encoder_mode != "bi":
            raise ConfigError("cross-encoder representations are query-dependent and cannot be precomputed")
