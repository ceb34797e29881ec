"""Matched KD-vs-CL distillation runs scored by the noise probe.

For each seed the same teacher, initial student, training corpus and probe
corpus are shared by the two losses, so the only difference within a pair is
the objective.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .corpus import synthetic_corpus
from .models import EncoderConfig, TeacherModel, init_student_from_teacher
from .probe import ForestConfig, run_probe
from .trainer import TrainingConfig, train_distill


@dataclass(frozen=True)
class PairSettings:
    steps: int = 800
    setup: str = "both"
    corpus_size: int = 256
    probe_size: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    forest: ForestConfig = ForestConfig()


@dataclass
class PairResult:
    seed: int
    teacher_mode: str
    accuracy: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def gap(self) -> float:
        """KD accuracy minus CL accuracy; positive when CL leaks less noise information."""
        return self.accuracy["kd"] - self.accuracy["cl"]


def run_pair(seed: int, teacher_mode: str = "variant", settings: PairSettings = PairSettings()) -> PairResult:
    start = time.perf_counter()
    teacher = TeacherModel(EncoderConfig(seed=seed))
    corpus = synthetic_corpus(settings.corpus_size, seed=1000 + seed)
    probe_corpus = synthetic_corpus(settings.probe_size, seed=2000 + seed)
    base = TrainingConfig(
        setup=settings.setup, teacher_mode=teacher_mode, steps=settings.steps,
        batch_size=settings.batch_size, learning_rate=settings.learning_rate, seed=seed,
        dev_eval_every=settings.steps,
    )
    result = PairResult(seed, teacher_mode)
    for loss in ("kd", "cl"):
        student = init_student_from_teacher(teacher, seed=seed)
        student, _ = train_distill(replace(base, loss=loss), teacher, student, corpus)
        forest = replace(settings.forest, seed=seed)
        result.accuracy[loss] = run_probe(student, probe_corpus, forest, seed=seed)["overall_acc"]
    result.seconds = time.perf_counter() - start
    return result
