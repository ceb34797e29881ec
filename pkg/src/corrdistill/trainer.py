"""Distillation pre-training loop.

Setups
------
``student_only``: the teacher always sees the clean utterance.
``both``: teacher and student each get an independently sampled distortion.

With ``teacher_mode="invariant"`` the teacher is fed the clean waveform no
matter what the setup says, which stands in for a noise-robust teacher.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import (
    ADDITIVE_KINDS,
    CLEAN_SNR_DB,
    NON_ADDITIVE_KINDS,
    AudioBuffer,
    DistortionPlan,
    DistortionSpec,
    apply_plan,
    logmel_frontend,
)
from .exceptions import ConfigError, ContractError, NumericalError
from .losses import LossWeights, RepresentationBatch, bt_loss, cl_loss, kd_loss_report
from .models import StudentModel, TeacherModel

logger = logging.getLogger(__name__)

SETUPS = ("student_only", "both")
LOSSES = ("kd", "cl", "bt_reference")
TEACHER_MODES = ("variant", "invariant")


@dataclass(frozen=True)
class DistortionPolicy:
    """Per view: one additive noise, plus one non-additive distortion with some probability."""

    additive_kinds: tuple[str, ...] = ADDITIVE_KINDS
    non_additive_prob: float = 0.5
    non_additive_kinds: tuple[str, ...] = NON_ADDITIVE_KINDS
    rt60_range: tuple[float, float] = (0.1, 0.6)
    semitone_range: tuple[float, float] = (-4.0, 4.0)
    notch_center_range: tuple[float, float] = (200.0, 4000.0)
    notch_q_range: tuple[float, float] = (1.0, 5.0)

    def sample(self, rng: np.random.Generator, seed: int) -> DistortionPlan:
        specs = []
        if self.non_additive_kinds and rng.random() < self.non_additive_prob:
            kind = self.non_additive_kinds[rng.integers(len(self.non_additive_kinds))]
            if kind == "reverb":
                specs.append(DistortionSpec("reverb", rt60_s=rng.uniform(*self.rt60_range)))
            elif kind == "pitch_shift":
                specs.append(DistortionSpec("pitch_shift", semitones=rng.uniform(*self.semitone_range)))
            else:
                specs.append(DistortionSpec(
                    "band_reject",
                    center_hz=rng.uniform(*self.notch_center_range),
                    q=rng.uniform(*self.notch_q_range),
                ))
        if self.additive_kinds:
            kind = self.additive_kinds[rng.integers(len(self.additive_kinds))]
            specs.append(DistortionSpec(kind, snr_db=rng.uniform(10.0, 20.0)))
        return DistortionPlan(tuple(specs), seed)


@dataclass(frozen=True)
class TrainingConfig:
    setup: str = "both"
    loss: str = "cl"
    teacher_mode: str = "variant"
    gamma: float = 1.0
    lambda_cc: float = 5e-5
    lambda_sc: float = 5e-6
    heuristic: bool = False
    normalization: str = "standardize"
    bt_lambda: float = 5e-3
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    dev_eval_every: int = 200
    non_additive_prob: float = 0.5
    additive_kinds: str = ",".join(ADDITIVE_KINDS)
    non_additive_kinds: str = ",".join(NON_ADDITIVE_KINDS)
    n_mels: int = 40
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ConfigError(f"setup must be one of {SETUPS}, got {self.setup!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"teacher_mode must be one of {TEACHER_MODES}, got {self.teacher_mode!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or (self.loss != "kd" and self.batch_size < 2):
            raise ConfigError(f"batch_size {self.batch_size} too small for loss {self.loss!r}")
        if self.dev_eval_every < 1:
            raise ConfigError("dev_eval_every must be >= 1")
        for kinds, allowed in ((self.additive_kinds, ADDITIVE_KINDS), (self.non_additive_kinds, NON_ADDITIVE_KINDS)):
            bad = [k for k in _split(kinds) if k not in allowed]
            if bad:
                raise ConfigError(f"unknown distortion kinds {bad}")
        self.weights  # validates lambdas

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.gamma, self.lambda_cc, self.lambda_sc, self.heuristic)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def policy(self) -> DistortionPolicy:
        return DistortionPolicy(
            additive_kinds=_split(self.additive_kinds),
            non_additive_prob=self.non_additive_prob,
            non_additive_kinds=_split(self.non_additive_kinds),
        )


def _split(kinds: str) -> tuple[str, ...]:
    return tuple(k.strip() for k in kinds.split(",") if k.strip())


@dataclass
class RunRecord:
    step: int
    report: dict
    student_snr_db: float
    teacher_snr_db: float
    dev_loss: float | None = None

    def to_json(self) -> str:
        row = {"step": self.step, **self.report, "dev_loss": self.dev_loss,
               "student_snr_db": self.student_snr_db, "teacher_snr_db": self.teacher_snr_db}
        return json.dumps(row)


@dataclass
class ViewBatch:
    teacher_views: list[AudioBuffer]
    student_views: list[AudioBuffer]
    snr_pairs: list[tuple[float, float]]  # (teacher, student) per utterance
    teacher_plans: list[DistortionPlan | None] = field(default_factory=list)
    student_plans: list[DistortionPlan] = field(default_factory=list)


def sample_views(
    clean_batch: Sequence[AudioBuffer],
    setup: str,
    policy: DistortionPolicy = DistortionPolicy(),
    seed=0,
    teacher_mode: str = "variant",
) -> ViewBatch:
    """Draw distorted teacher/student views for a batch of clean utterances."""
    if not clean_batch:
        raise ContractError("cannot sample views for an empty batch")
    if setup not in SETUPS:
        raise ContractError(f"setup must be one of {SETUPS}, got {setup!r}")
    seq = np.random.SeedSequence(np.atleast_1d(seed).tolist())
    out = ViewBatch([], [], [])
    for clean, child in zip(clean_batch, seq.spawn(len(clean_batch))):
        rng = np.random.default_rng(child)
        plan_seeds = rng.integers(0, 2**31, size=2)
        student_plan = policy.sample(rng, int(plan_seeds[0]))
        out.student_views.append(apply_plan(clean, student_plan))
        out.student_plans.append(student_plan)
        if setup == "both":
            teacher_plan = policy.sample(rng, int(plan_seeds[1]))
        if setup == "both" and teacher_mode == "variant":
            out.teacher_views.append(apply_plan(clean, teacher_plan))
            out.teacher_plans.append(teacher_plan)
            teacher_snr = teacher_plan.effective_snr_db
        else:
            out.teacher_views.append(clean)
            out.teacher_plans.append(None)
            teacher_snr = CLEAN_SNR_DB
        out.snr_pairs.append((teacher_snr, student_plan.effective_snr_db))
    return out


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def features_for(views: Sequence[AudioBuffer], config: TrainingConfig) -> np.ndarray:
    return np.stack([logmel_frontend(v, config.n_mels, config.frame_ms, config.hop_ms) for v in views])


def compute_loss(
    config: TrainingConfig,
    predictions: ad.Tensor,
    targets: np.ndarray,
    teacher_snr_db: float = CLEAN_SNR_DB,
    student_snr_db: float = CLEAN_SNR_DB,
) -> tuple[ad.Tensor, dict]:
    """Configured objective on (B, P, T, D) predictions/targets."""
    batch = RepresentationBatch(predictions, targets)
    if config.loss == "kd":
        return kd_loss_report(batch, config.gamma)
    if config.loss == "cl":
        return cl_loss(batch, config.weights, teacher_snr_db, student_snr_db, config.normalization)
    total = bt_loss(batch.student, batch.teacher, config.bt_lambda)
    return total, {"l_bt": total.item(), "l_total": total.item()}


def evaluate_dev_loss(
    student: StudentModel, teacher: TeacherModel, dev_corpus: Sequence[AudioBuffer], config: TrainingConfig
) -> float:
    """Configured loss on clean inputs, the whole dev set forming one batch.

    A single batch keeps batch-statistics losses independent of dev-set order.
    """
    if not dev_corpus:
        raise ContractError("dev corpus is empty")
    feats = features_for(dev_corpus, config)
    targets = teacher.targets(feats)
    _, predictions = student(feats)
    loss, _ = compute_loss(config, predictions, targets)
    return loss.item()


def train_distill(
    config: TrainingConfig,
    teacher: TeacherModel,
    student: StudentModel,
    corpus: Sequence[AudioBuffer],
    dev_corpus: Sequence[AudioBuffer] | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> tuple[StudentModel, list[RunRecord]]:
    """Train ``student`` in place and return it with one record per step.

    When ``checkpoint_dir`` is given, the student is saved at every dev
    evaluation under ``step_XXXXXX``.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    if student.config.model_dim != teacher.config.model_dim or student.config.input_dim != teacher.config.input_dim:
        raise ContractError("student and teacher dimensions differ")
    b = min(config.batch_size, len(corpus))
    if config.loss != "kd" and b < 2:
        raise ContractError("correlation losses need at least two utterances per batch")
    policy = config.policy
    optimizer = Adam(student.parameters(), lr=config.learning_rate)
    records: list[RunRecord] = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, config.steps + 1):
            rng = np.random.default_rng([config.seed, step, 0])
            idx = rng.choice(len(corpus), size=b, replace=False)
            views = sample_views(
                [corpus[i] for i in idx], config.setup, policy, seed=[config.seed, step, 1],
                teacher_mode=config.teacher_mode,
            )
            teacher_snr = float(np.mean([t for t, _ in views.snr_pairs]))
            student_snr = float(np.mean([s for _, s in views.snr_pairs]))
            targets = teacher.targets(features_for(views.teacher_views, config))
            inputs = features_for(views.student_views, config)
            with ad.GradientTape() as tape:
                _, predictions = student(inputs)
                loss, report = compute_loss(config, predictions, targets, teacher_snr, student_snr)
            record = RunRecord(step, report, student_snr, teacher_snr)
            if not math.isfinite(report["l_total"]):
                records.append(record)
                if log:
                    log.write(record.to_json() + "\n")
                raise NumericalError(f"non-finite loss at step {step}: {report}")
            grads = tape.gradient(loss, student.parameters())
            optimizer.step(grads)
            if step % config.dev_eval_every == 0 or step == config.steps:
                if dev_corpus:
                    record.dev_loss = evaluate_dev_loss(student, teacher, dev_corpus, config)
                if checkpoint_dir is not None:
                    student.save(Path(checkpoint_dir) / checkpoint_name(step))
            records.append(record)
            if log:
                log.write(record.to_json() + "\n")
    finally:
        if log:
            log.close()
    return student, records


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}"


def select_checkpoint(records: Sequence[RunRecord], checkpoints=None):
    """Checkpoint with the lowest dev loss; ties go to the earliest step.

    ``checkpoints`` maps step -> checkpoint id; without it the step is returned.
    """
    scored = [(r.dev_loss, r.step) for r in records if r.dev_loss is not None]
    if checkpoints is not None:
        scored = [(loss, step) for loss, step in scored if step in checkpoints]
    if not scored:
        raise ContractError("no checkpoint with a dev loss to select from")
    _, best_step = min(scored)
    return best_step if checkpoints is None else checkpoints[best_step]


def smoothed_losses(records: Sequence[RunRecord], window: int = 50) -> np.ndarray:
    """Trailing moving average of the per-step total loss."""
    values = np.array([r.report["l_total"] for r in records], dtype=np.float64)
    if values.size == 0:
        return values
    window = max(1, min(window, values.size))
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    start = np.maximum(idx - window, 0)
    return (csum[idx] - csum[start]) / (idx - start)


def loss_reduction(records: Sequence[RunRecord], window: int = 50) -> float:
    """Fractional drop from the mean of the first ``window`` losses to the mean of the last."""
    values = np.array([r.report["l_total"] for r in records], dtype=np.float64)
    if values.size == 0:
        raise ContractError("no records")
    window = max(1, min(window, values.size))
    first, last = values[:window].mean(), values[-window:].mean()
    return float(1.0 - last / first)


def config_to_dict(config) -> dict:
    return asdict(config)


def config_fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}
