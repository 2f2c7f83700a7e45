"""Finite-difference check of every trainable path: three ranker heads, three losses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .distill import TeacherTargets, hard_batch_loss, trmd_batch_loss
from .encoder import EncoderConfig
from .model import ModelConfig, RankingModel
from .tensor import finite_diff_check

THRESHOLD = 1e-4


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_case: dict[str, float]
    worst: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < THRESHOLD

    def lines(self) -> list[str]:
        out = [f"case {name} max_rel_error {err:.3e}" for name, err in self.per_case.items()]
        out.append(f"max_rel_error {self.max_rel_error:.3e}")
        return out


def _toy_batch(rng: np.random.Generator, vocab_size: int, n: int = 2) -> list[tuple[list, list, list]]:
    def text(lo, hi):
        return rng.integers(4, vocab_size, size=int(rng.integers(lo, hi + 1))).tolist()

    return [(text(2, 3), text(3, 5), text(3, 5)) for _ in range(n)]


def gradcheck(encoder: EncoderConfig, seed: int = 0, h: float = 1e-5, max_coords: int | None = 12,
              batch_size: int = 2) -> GradcheckReport:
    """Autodiff vs central differences on random toy triplets.

    Cases: the three teachers under the hard loss, then bi and cross TRMD
    students (twin and MaxSim) under hard + CLS + representation losses.
    Teachers in the student cases are frozen and only the student is probed.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    batch = _toy_batch(rng, encoder.vocab_size, batch_size)
    probe_rng = np.random.default_rng(seed + 1)
    teachers = {k: RankingModel(ModelConfig(kind=k, encoder=encoder), seed=seed + i)
                for i, k in enumerate(("mono_cross", "twin_bi", "colbert_bi"))}
    per_case, worst = {}, {}

    def run(name, model, loss_fn):
        report: dict = {}
        err = finite_diff_check(lambda: loss_fn().total, model.parameters().values(), h, report, max_coords, probe_rng)
        per_case[name] = err
        name_worst = max(report.items(), key=lambda kv: kv[1][0])
        worst[name] = (name_worst[0],) + name_worst[1]

    for kind, model in teachers.items():
        run(kind, model, lambda m=model: hard_batch_loss(m, batch))
    for mode in ("bi", "cross"):
        for bi_kind in ("twin", "colbert"):
            student = RankingModel(ModelConfig(kind="trmd", encoder=encoder, encoder_mode=mode, bi_ranker=bi_kind),
                                   seed=seed + 10)
            targets = TeacherTargets(teachers["mono_cross"], teachers[f"{bi_kind}_bi"])
            targets.prepare_triplets(student, batch)
            run(f"trmd-{mode}-{bi_kind}", student, lambda s=student, t=targets: trmd_batch_loss(s, t, batch))
    return GradcheckReport(max(per_case.values()), per_case, worst, time.perf_counter() - start)
