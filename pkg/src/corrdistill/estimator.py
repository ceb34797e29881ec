"""scikit-learn style wrapper around teacher construction and distillation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AudioBuffer, logmel_frontend
from .exceptions import ContractError
from .models import EncoderConfig, TeacherModel, init_student_from_teacher
from .trainer import TrainingConfig, train_distill


def _as_buffers(X, sample_rate_hz: int) -> list[AudioBuffer]:
    if isinstance(X, np.ndarray) and X.ndim == 1:
        raise ContractError("X must be a sequence of waveforms, got one 1-d array")
    return [x if isinstance(x, AudioBuffer) else AudioBuffer(np.asarray(x, dtype=np.float64), sample_rate_hz)
            for x in X]


class CorrelationDistiller(TransformerMixin, BaseEstimator):
    """Distil a frozen teacher into a shallow student; ``transform`` gives pooled embeddings.

    Parameters
    ----------
    loss : {"cl", "kd", "bt_reference"}
    setup : {"both", "student_only"}
        Whether the teacher input is distorted too or stays clean.
    teacher_mode : {"variant", "invariant"}
        ``invariant`` feeds the teacher clean audio only.
    steps, batch_size, learning_rate : training schedule.
    gamma, lambda_cc, lambda_sc, heuristic : loss weights.
    model_dim, n_heads, n_mels : encoder sizes.
    teacher : TeacherModel or None
        Pre-built frozen teacher. A seeded random one is made when omitted.
    seed : int

    Attributes
    ----------
    teacher_ : TeacherModel
    student_ : StudentModel
    records_ : list of RunRecord
    """

    def __init__(self, loss="cl", setup="both", teacher_mode="variant", steps=2000, batch_size=8,
                 learning_rate=1e-3, gamma=1.0, lambda_cc=5e-5, lambda_sc=5e-6, heuristic=False,
                 model_dim=32, n_heads=4, n_mels=40, sample_rate_hz=16000, teacher=None, seed=0):
        self.loss = loss
        self.setup = setup
        self.teacher_mode = teacher_mode
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.lambda_cc = lambda_cc
        self.lambda_sc = lambda_sc
        self.heuristic = heuristic
        self.model_dim = model_dim
        self.n_heads = n_heads
        self.n_mels = n_mels
        self.sample_rate_hz = sample_rate_hz
        self.teacher = teacher
        self.seed = seed

    def _training_config(self) -> TrainingConfig:
        return TrainingConfig(
            setup=self.setup, loss=self.loss, teacher_mode=self.teacher_mode, gamma=self.gamma,
            lambda_cc=self.lambda_cc, lambda_sc=self.lambda_sc, heuristic=self.heuristic,
            steps=self.steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
            seed=self.seed, dev_eval_every=self.steps, n_mels=self.n_mels,
        )

    def fit(self, X, y=None):
        """Train on clean waveforms ``X`` (equal-length 1-d arrays or AudioBuffers)."""
        config = self._training_config()
        corpus = _as_buffers(X, self.sample_rate_hz)
        if len({len(b) for b in corpus}) != 1:
            raise ContractError("all training waveforms must have the same length")
        teacher = self.teacher or TeacherModel(
            EncoderConfig(input_dim=self.n_mels, model_dim=self.model_dim, n_heads=self.n_heads, seed=self.seed)
        )
        student = init_student_from_teacher(teacher, seed=self.seed)
        self.student_, self.records_ = train_distill(config, teacher, student, corpus)
        self.teacher_ = teacher
        return self

    def transform(self, X) -> np.ndarray:
        """Time-averaged last student layer, one row per waveform."""
        check_is_fitted(self, "student_")
        feats = [logmel_frontend(b, self.n_mels) for b in _as_buffers(X, self.sample_rate_hz)]
        return np.stack([self.student_.embed(f[None])[0].mean(axis=0) for f in feats])
