"""Distillation losses and the teacher / student training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import RepBundle, TextReps, encode_bi_batch, encode_cross_batch, fit_cross, pair_bi
from .errors import ConfigError, ContractError, InputError, NumericError
from .model import TEACHER_KINDS, ModelConfig, RankingModel
from .rankers import ScoreBreakdown
from .task import RankingTask
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STUDENT_SEED_OFFSET = 1000


@dataclass
class TrainerConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_head: float = 1e-3
    lr_encoder: float = 1e-4
    margin: float = 1.0
    seed: int = 0
    val_k: int = 20
    clip_norm: float = 5.0

    def validate(self) -> "TrainerConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_head <= 0 or self.lr_encoder <= 0 or self.margin <= 0:
            raise ConfigError("learning rates and margin must be positive")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossBreakdown:
    hard: Tensor | float
    cls: Tensor | float
    rep: Tensor | float
    total: Tensor | float

    def floats(self) -> tuple[float, float, float, float]:
        return tuple(float(x.data) if isinstance(x, Tensor) else float(x)
                     for x in (self.hard, self.cls, self.rep, self.total))


@dataclass
class EpochLog:
    epoch: int
    hard: float
    cls: float
    rep: float
    total: float
    val_metric: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.hard:.10f}\t{self.cls:.10f}\t{self.rep:.10f}\t"
                f"{self.total:.10f}\t{self.val_metric:.10f}")


@dataclass
class TrainResult:
    model: RankingModel
    log: list[EpochLog]
    best_epoch: int
    best_metric: float
    teacher_checksums: dict = field(default_factory=dict)

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


# -- losses -------------------------------------------------------------------------


def hard_pred_loss(s_pos: Tensor, s_neg: Tensor, margin: float = 1.0) -> Tensor:
    """Mean over the batch of max(0, m - (softmax(z)_pos - softmax(z)_neg)), z = (s_pos, s_neg)."""
    z = T.stack([s_pos, s_neg], axis=-1)
    sig = T.softmax(z, axis=-1)
    diff = T.sub(T.take(sig, (..., 0)), T.take(sig, (..., 1)))
    return T.mean(T.relu(T.add(T.scale(diff, -1.0), margin)))


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def cls_loss(teacher_cls, student_cls: Tensor) -> Tensor:
    """Mean squared error; the teacher side never receives gradient."""
    t = _const(teacher_cls)
    if t.shape != student_cls.shape:
        raise ConfigError(f"CLS shapes differ: teacher {t.shape} vs student {student_cls.shape}")
    d = T.sub(student_cls, t)
    return T.mean(T.mul(d, d))


def _pad_to(arr: np.ndarray, length: int) -> np.ndarray:
    if arr.shape[1] == length:
        return arr
    if arr.shape[1] > length:
        return arr[:, :length]
    pad = np.zeros((arr.shape[0], length - arr.shape[1]) + arr.shape[2:])
    return np.concatenate([arr, pad], axis=1)


def rep_loss(teacher: RepBundle, student: RepBundle) -> Tensor:
    """MSE over CLS vectors and unmasked token rows, averaged per pair then over the batch.

    CLS vectors take part when both bundles have per-side CLS (bi mode).
    """
    for side in ("query_mask", "doc_mask"):
        tc = np.asarray(getattr(teacher, side)).sum(axis=1)
        sc = np.asarray(getattr(student, side)).sum(axis=1)
        if tc.shape != sc.shape or np.any(tc != sc):
            raise ContractError(f"token counts differ between teacher and student ({side}): {tc} vs {sc}")
    h = student.query_reps.shape[-1]
    if teacher.query_reps.shape[-1] != h:
        raise ConfigError("teacher and student hidden widths differ")
    qm = student.query_mask.astype(np.float64)
    dm = student.doc_mask.astype(np.float64)
    parts = []
    count = (qm.sum(axis=1) + dm.sum(axis=1)) * h
    for s_reps, t_reps, m in ((student.query_reps, teacher.query_reps, qm), (student.doc_reps, teacher.doc_reps, dm)):
        t_arr = _pad_to(_const(t_reps).data, s_reps.shape[1])
        d = T.mul_const(T.sub(s_reps, Tensor(t_arr)), m[:, :, None])
        parts.append(T.sum(T.sum(T.mul(d, d), axis=2), axis=1))
    if student.mode == "bi" and teacher.mode == "bi":
        for s_cls, t_cls in ((student.cls_query, teacher.cls_query), (student.cls_doc, teacher.cls_doc)):
            d = T.sub(s_cls, _const(t_cls))
            parts.append(T.sum(T.mul(d, d), axis=1))
        count = count + 2 * h
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return T.mean(T.mul_const(total, 1.0 / count))


def total_loss(hard, cls=0.0, rep=0.0) -> LossBreakdown:
    total = hard
    for term in (cls, rep):
        if isinstance(term, Tensor):
            total = T.add(total, term)
        elif term:
            total = T.add(total, float(term))
    return LossBreakdown(hard, cls, rep, total)


# -- optimisation -----------------------------------------------------------------------


class Optimizer:
    """SGD over parameter groups with their own learning rates, clipped at a global norm."""

    def __init__(self, groups: Sequence[tuple[list[Tensor], float]], clip_norm: float = 5.0):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.clip_norm = clip_norm

    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        sq = 0.0
        for p in self.params():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        factor = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        for ps, lr in self.groups:
            for p in ps:
                if p.grad is not None:
                    p.data = p.data - (lr * factor) * p.grad
        return norm


def make_optimizer(model: RankingModel, cfg: TrainerConfig) -> Optimizer:
    return Optimizer([(model.encoder_tensors(), cfg.lr_encoder), (model.head_tensors(), cfg.lr_head)],
                     cfg.clip_norm)


# -- batched forward ----------------------------------------------------------------------


def _split_reps(r: TextReps, n: int) -> tuple[TextReps, TextReps]:
    a = TextReps(T.take(r.cls, slice(0, n)), T.take(r.tokens, slice(0, n)), r.mask[:n])
    b = TextReps(T.take(r.cls, slice(n, None)), T.take(r.tokens, slice(n, None)), r.mask[n:])
    return a, b


def _split_bundle(b: RepBundle, n: int) -> tuple[RepBundle, RepBundle]:
    out = []
    for sl in (slice(0, n), slice(n, None)):
        out.append(RepBundle(
            mode=b.mode, query_reps=T.take(b.query_reps, sl), doc_reps=T.take(b.doc_reps, sl),
            query_mask=b.query_mask[sl], doc_mask=b.doc_mask[sl],
            cls_joint=None if b.cls_joint is None else T.take(b.cls_joint, sl),
            cls_query=None if b.cls_query is None else T.take(b.cls_query, sl),
            cls_doc=None if b.cls_doc is None else T.take(b.cls_doc, sl)))
    return out[0], out[1]


def triplet_bundles(model: RankingModel, queries, pos, neg, rng=None) -> tuple[RepBundle, RepBundle]:
    """Encode a triplet batch: each query once, positives and negatives in one pass."""
    n = len(queries)
    if model.config.encoder_mode == "cross":
        both = encode_cross_batch(list(zip(list(queries) * 2, list(pos) + list(neg))), model.encoder, rng)
        return _split_bundle(both, n)
    q = encode_bi_batch(queries, model.encoder, "query", rng)
    d = encode_bi_batch(list(pos) + list(neg), model.encoder, "document", rng)
    dp, dn = _split_reps(d, n)
    return pair_bi(q, dp), pair_bi(q, dn)


# -- teacher targets ----------------------------------------------------------------------


class TeacherTargets:
    """Frozen-teacher outputs, computed once per distinct input (teachers never change)."""

    def __init__(self, cross_teacher: RankingModel | None, bi_teacher: RankingModel | None, chunk: int = 128):
        self.cross = cross_teacher
        self.bi = bi_teacher
        self.chunk = chunk
        self.cls_joint: dict[tuple, np.ndarray] = {}
        self.bi_reps: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def prepare(self, pairs: Sequence[tuple[list, list]], texts: Sequence[list]) -> None:
        if self.cross is not None:
            todo = list(dict.fromkeys((tuple(q), tuple(d)) for q, d in pairs if (tuple(q), tuple(d)) not in self.cls_joint))
            for i in range(0, len(todo), self.chunk):
                part = todo[i : i + self.chunk]
                out = encode_cross_batch(part, self.cross.encoder).cls_joint.data
                for key, row in zip(part, out):
                    self.cls_joint[key] = row
        if self.bi is not None:
            todo = list(dict.fromkeys(tuple(t) for t in texts if tuple(t) not in self.bi_reps))
            for i in range(0, len(todo), self.chunk):
                part = todo[i : i + self.chunk]
                out = encode_bi_batch(part, self.bi.encoder, "document")
                for j, key in enumerate(part):
                    n = len(key)
                    self.bi_reps[key] = (out.cls.data[j], out.tokens.data[j, :n])

    def prepare_triplets(self, student: RankingModel, triplets) -> None:
        """Targets for every (query, pos, neg) token triplet the student will see."""
        pairs, texts = [], []
        for q, p, n in triplets:
            for d in (_fit(student, q, p), _fit(student, q, n)):
                pairs.append(_cross_fit(self.cross, q, d))
                texts.append(d)
            texts.append(q)
        self.prepare(pairs, texts)

    def cls_batch(self, queries, docs) -> np.ndarray:
        return np.stack([self.cls_joint[(tuple(q), tuple(d))] for q, d in zip(queries, docs)])

    def text_batch(self, texts) -> tuple[np.ndarray, np.ndarray]:
        rows = [self.bi_reps[tuple(t)] for t in texts]
        h = rows[0][0].shape[0]
        L = max(r[1].shape[0] for r in rows)
        toks = np.zeros((len(rows), L, h))
        for i, (_, tk) in enumerate(rows):
            toks[i, : tk.shape[0]] = tk
        return np.stack([r[0] for r in rows]), toks

    def rep_bundle(self, queries, docs, student: RepBundle) -> RepBundle:
        qc, qt = self.text_batch(queries)
        dc, dt = self.text_batch(docs)
        return RepBundle(mode="bi", query_reps=Tensor(qt), doc_reps=Tensor(dt),
                         query_mask=student.query_mask, doc_mask=student.doc_mask,
                         cls_query=Tensor(qc), cls_doc=Tensor(dc))


# -- per-batch losses ----------------------------------------------------------------------


def hard_batch_loss(model: RankingModel, batch, margin: float = 1.0, drop_rng=None) -> LossBreakdown:
    """Hard loss only: teachers and the TR ablation."""
    qs, ps, ns = zip(*batch)
    ps = [_fit(model, q, d) for q, d in zip(qs, ps)]
    ns = [_fit(model, q, d) for q, d in zip(qs, ns)]
    bp, bn = triplet_bundles(model, qs, ps, ns, drop_rng)
    s_pos, _ = model.score_bundle(bp)
    s_neg, _ = model.score_bundle(bn)
    return total_loss(hard_pred_loss(s_pos, s_neg, margin))


def trmd_batch_loss(model: RankingModel, targets: "TeacherTargets", batch, margin: float = 1.0,
                    drop_rng=None) -> LossBreakdown:
    """Hard + CLS + representation loss; ``targets`` must already cover the batch."""
    qs, ps, ns = zip(*batch)
    ps = [_fit(model, q, d) for q, d in zip(qs, ps)]
    ns = [_fit(model, q, d) for q, d in zip(qs, ns)]
    bp, bn = triplet_bundles(model, qs, ps, ns, drop_rng)
    cls_p, cls_n = model.student_cls(bp), model.student_cls(bn)
    s_pos, _ = model.score_bundle(bp, cls_p)
    s_neg, _ = model.score_bundle(bn, cls_n)
    hard = hard_pred_loss(s_pos, s_neg, margin)
    t_cls_p = targets.cls_batch(*zip(*[_cross_fit(targets.cross, q, d) for q, d in zip(qs, ps)]))
    t_cls_n = targets.cls_batch(*zip(*[_cross_fit(targets.cross, q, d) for q, d in zip(qs, ns)]))
    l_cls = T.scale(T.add(cls_loss(t_cls_p, cls_p), cls_loss(t_cls_n, cls_n)), 0.5)
    l_rep = T.scale(T.add(rep_loss(targets.rep_bundle(qs, ps, bp), bp),
                          rep_loss(targets.rep_bundle(qs, ns, bn), bn)), 0.5)
    return total_loss(hard, l_cls, l_rep)


# -- training loops ---------------------------------------------------------------------------


def _tokenized_triplets(task: RankingTask):
    out = []
    for t in task.triplets:
        out.append((task.query_tokens(t.query_id), task.doc_tokens(t.pos_doc_id), task.doc_tokens(t.neg_doc_id)))
    return out


def _fit(model: RankingModel, q, d) -> list:
    """Document tokens as the model will actually see them next to query ``q``."""
    if model.config.encoder_mode == "bi":
        return model.fit_doc(d)
    return fit_cross(q, d, model.config.encoder.max_len)[1]


def _train(model: RankingModel, task: RankingTask, cfg: TrainerConfig, step_loss, label: str) -> TrainResult:
    cfg.validate()
    data = _tokenized_triplets(task)
    if not data:
        raise InputError("no training triplets")
    if not task.val_queries:
        raise InputError("empty validation fold")
    rng = np.random.default_rng(cfg.seed + 7919)
    drop_rng = np.random.default_rng(cfg.seed + 104729) if model.config.encoder.dropout > 0 else None
    opt = make_optimizer(model, cfg)
    history: list[EpochLog] = []
    best_metric, best_epoch, best_snap = -1.0, 0, model.snapshot()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [data[i] for i in idx]
            opt.zero_grad()
            with Tape() as tape:
                losses = step_loss(batch, drop_rng)
            vals = losses.floats()
            if not all(math.isfinite(v) for v in vals):
                raise NumericError(f"{label}: non-finite loss at epoch {epoch}: {vals}")
            T.backward(losses.total, tape)
            opt.step()
            sums += np.array(vals) * len(batch)
        hard, cls_, rep, total = (sums / len(data)).tolist()
        metric = task.precision(model, task.val_queries, cfg.val_k)
        history.append(EpochLog(epoch, hard, cls_, rep, total, metric))
        log.info("%s epoch %d: hard=%.4f cls=%.4f rep=%.4f val_p@%d=%.4f", label, epoch, hard, cls_, rep, cfg.val_k, metric)
        if metric >= best_metric:
            best_metric, best_epoch, best_snap = metric, epoch, model.snapshot()
    model.restore(best_snap)
    return TrainResult(model, history, best_epoch, best_metric)


def train_teacher(kind: str, task: RankingTask, cfg: TrainerConfig, encoder_config, **model_kw) -> TrainResult:
    """Fine-tune one teacher (encoder + its single ranker) with the hard loss only."""
    if kind not in TEACHER_KINDS:
        raise ConfigError(f"unknown teacher kind {kind!r}")
    model = RankingModel(ModelConfig(kind=kind, encoder=encoder_config, **model_kw), seed=cfg.seed)

    def step(batch, drop_rng):
        return hard_batch_loss(model, batch, cfg.margin, drop_rng)

    return _train(model, task, cfg, step, f"teacher[{kind}]")


def _student(encoder_config, student_encoder_mode: str, bi_ranker_kind: str, kind: str, seed: int,
             **model_kw) -> RankingModel:
    if bi_ranker_kind not in ("twin", "colbert"):
        raise ConfigError(f"bi_ranker_kind must be twin or colbert, got {bi_ranker_kind!r}")
    # own init stream: a student must not start as a copy of a same-seed teacher
    return RankingModel(ModelConfig(kind=kind, encoder=encoder_config, encoder_mode=student_encoder_mode,
                                    bi_ranker=bi_ranker_kind, **model_kw), seed=seed + STUDENT_SEED_OFFSET)


def train_student_trmd(student_encoder_mode: str, bi_ranker_kind: str, cross_teacher: RankingModel,
                       bi_teacher: RankingModel, task: RankingTask, cfg: TrainerConfig, encoder_config=None,
                       **model_kw) -> TrainResult:
    """Two-ranker student trained on hard + CLS + representation losses with frozen teachers."""
    if cross_teacher.config.kind != "mono_cross":
        raise ConfigError("cross teacher must be a mono_cross model")
    expected_bi = {"twin": "twin_bi", "colbert": "colbert_bi"}.get(bi_ranker_kind)
    if bi_teacher.config.kind != expected_bi:
        raise ConfigError(f"bi teacher for a {bi_ranker_kind} student must be {expected_bi}")
    encoder_config = encoder_config or bi_teacher.config.encoder
    for t in (cross_teacher, bi_teacher):
        if t.config.encoder.hidden != encoder_config.hidden:
            raise ConfigError("teacher and student hidden widths must match")
        if t.config.encoder.vocab_size != encoder_config.vocab_size:
            raise ConfigError("teacher and student vocabularies differ")
    model = _student(encoder_config, student_encoder_mode, bi_ranker_kind, "trmd", cfg.seed, **model_kw)
    before = {"cross": cross_teacher.checksum(), "bi": bi_teacher.checksum()}

    targets = TeacherTargets(cross_teacher, bi_teacher)
    targets.prepare_triplets(model, _tokenized_triplets(task))

    def step(batch, drop_rng):
        return trmd_batch_loss(model, targets, batch, cfg.margin, drop_rng)

    result = _train(model, task, cfg, step, f"trmd[{student_encoder_mode},{bi_ranker_kind}]")
    after = {"cross": cross_teacher.checksum(), "bi": bi_teacher.checksum()}
    if after != before:
        raise ContractError("teacher parameters changed during student training")
    result.teacher_checksums = after
    return result


def _cross_fit(cross_teacher: RankingModel, q, d) -> tuple[tuple, tuple]:
    return tuple(q), tuple(fit_cross(q, d, cross_teacher.config.encoder.max_len)[1])


def train_student_tr(student_encoder_mode: str, bi_ranker_kind: str, task: RankingTask, cfg: TrainerConfig,
                     encoder_config, **model_kw) -> TrainResult:
    """Same two-ranker student, hard loss only (no distillation)."""
    model = _student(encoder_config, student_encoder_mode, bi_ranker_kind, "tr", cfg.seed, **model_kw)

    def step(batch, drop_rng):
        return hard_batch_loss(model, batch, cfg.margin, drop_rng)

    return _train(model, task, cfg, step, f"tr[{student_encoder_mode},{bi_ranker_kind}]")
