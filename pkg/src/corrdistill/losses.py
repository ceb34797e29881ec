"""Distillation objectives.

All losses take student predictions of shape (B, P, T, D) (batch, prediction
heads, frames, features) and frozen teacher targets of the same shape. The
teacher side is always detached, so no gradient ever reaches it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import BatchSizeError, ContractError, DimensionError

logger = logging.getLogger(__name__)

LAMBDA_CC_DEFAULT = 5e-5
LAMBDA_SC_DEFAULT = 5e-6
HEURISTIC_SNR_RANGE = (10.0, 20.0)
NORMALIZATIONS = ("standardize", "center")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    lambda_cc: float = LAMBDA_CC_DEFAULT
    lambda_sc: float = LAMBDA_SC_DEFAULT
    heuristic: bool = False

    def __post_init__(self):
        for name in ("gamma", "lambda_cc", "lambda_sc"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")

    def resolve(self, teacher_snr_db=None, student_snr_db=None) -> tuple[float, float]:
        """Effective (lambda_cc, lambda_sc) for one step.

        With the heuristic on, lambda_cc follows the teacher input SNR and
        lambda_sc the student input SNR.
        """
        if not self.heuristic:
            return self.lambda_cc, self.lambda_sc
        if teacher_snr_db is None or student_snr_db is None:
            raise ContractError("heuristic weighting needs teacher and student SNR values")
        return heuristic_lambda(teacher_snr_db), heuristic_lambda(student_snr_db)


@dataclass
class RepresentationBatch:
    """Student predictions and teacher targets, both (B, P, T, D)."""

    student: Tensor
    teacher: Tensor

    def __post_init__(self):
        self.student = ad.as_tensor(self.student)
        teacher = self.teacher.data if isinstance(self.teacher, Tensor) else self.teacher
        # the teacher is frozen: never let it join the tape
        self.teacher = Tensor(teacher)
        if self.student.shape != self.teacher.shape:
            raise DimensionError(
                f"student {self.student.shape} and teacher {self.teacher.shape} shapes differ"
            )
        if self.student.ndim != 4:
            raise DimensionError(f"expected (B, P, T, D) representations, got {self.student.shape}")

    @property
    def batch_size(self) -> int:
        return self.student.shape[0]


def _require_batch(batch: RepresentationBatch) -> None:
    if batch.batch_size < 2:
        raise BatchSizeError(
            f"correlation along the batch needs B >= 2, got B={batch.batch_size}"
        )


def _normalize(x: Tensor, normalization: str) -> Tensor:
    if normalization == "standardize":
        return ad.batch_standardize(x)
    if normalization == "center":
        if x.shape[0] < 2:
            raise BatchSizeError(f"batch centering needs B >= 2, got shape {x.shape}")
        return x - x.mean(axis=0, keepdims=True)
    raise ContractError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")


def cosine_term(batch: RepresentationBatch) -> Tensor:
    """sum over heads and frames of log sigmoid(cos(h, h_hat)), averaged over the batch."""
    cos = ad.cosine_similarity(batch.student, batch.teacher, axis=-1)
    return ad.log_sigmoid(cos).sum() * (1.0 / batch.batch_size)


def kd_loss(batch: RepresentationBatch, gamma: float = 1.0) -> Tensor:
    """L1 + cosine distillation loss, summed over heads and frames, mean over batch."""
    return kd_loss_report(batch, gamma)[0]


def kd_loss_report(batch: RepresentationBatch, gamma: float = 1.0) -> tuple[Tensor, dict]:
    b, _, _, d = batch.student.shape
    l1 = ad.l1norm(batch.teacher - batch.student).sum() * (1.0 / (d * b))
    lcos = cosine_term(batch)
    total = l1 - gamma * lcos
    report = {"l1": l1.item(), "l_cos": lcos.item(), "l_total": total.item()}
    return total, report


def _bt_correlation(y1: Tensor, y2: Tensor, eps: float) -> Tensor:
    b = y1.shape[0]
    num = ad.batched_outer(y1, y2) * float(b)
    n1 = ad.sqrt(ad.square(y1).sum(axis=0) + eps * eps)
    n2 = ad.sqrt(ad.square(y2).sum(axis=0) + eps * eps)
    d = n1.shape[-1]
    denom = n1.reshape(n1.shape + (1,)) * n2.reshape(n2.shape[:-1] + (1, d))
    return num / denom


def bt_loss(y_v1, y_v2, lam: float = 5e-3, eps: float = 1e-8) -> Tensor:
    """Barlow Twins loss on batch-wise normalized cross-correlation.

    ``y_v1``/``y_v2`` are (B, D), or (B, ..., D) in which case the loss is
    computed per slice and averaged over the middle axes. No centering is
    applied: the correlation is the raw cosine between feature columns.
    """
    y1, y2 = ad.as_tensor(y_v1), ad.as_tensor(y_v2)
    if y1.shape != y2.shape:
        raise DimensionError(f"view shapes differ: {y1.shape} vs {y2.shape}")
    if y1.ndim < 2:
        raise DimensionError(f"expected (B, ..., D) inputs, got {y1.shape}")
    if y1.shape[0] < 2:
        raise BatchSizeError(f"Barlow Twins needs B >= 2, got B={y1.shape[0]}")
    c = _bt_correlation(y1, y2, eps)
    d = c.shape[-1]
    on = ad.square(1.0 - ad.diagonal(c)).sum(axis=-1)
    off = (ad.square(c) * _off_diagonal_mask(d)).sum(axis=(-1, -2))
    per_slice = on + lam * off
    return per_slice.mean() if per_slice.ndim else per_slice


def cross_corr(batch: RepresentationBatch, normalization: str = "standardize") -> Tensor:
    """Student/teacher cross-correlation, shape (P, T, D, D)."""
    _require_batch(batch)
    return ad.batched_outer(_normalize(batch.student, normalization), _normalize(batch.teacher, normalization))


def self_corr(student, normalization: str = "standardize") -> Tensor:
    """Student self-correlation, shape (P, T, D, D), symmetric by construction."""
    student = ad.as_tensor(student)
    if student.ndim != 4:
        raise DimensionError(f"expected (B, P, T, D) representations, got {student.shape}")
    if student.shape[0] < 2:
        raise BatchSizeError(f"correlation along the batch needs B >= 2, got B={student.shape[0]}")
    return _symmetric_outer(_normalize(student, normalization))


def _symmetric_outer(s: Tensor) -> Tensor:
    c = ad.batched_outer(s, s)
    return (c + ad.swapaxes(c, -1, -2)) * 0.5


_MASKS: dict[int, np.ndarray] = {}


def _off_diagonal_mask(d: int) -> np.ndarray:
    mask = _MASKS.get(d)
    if mask is None:
        mask = _MASKS[d] = 1.0 - np.eye(d)
        mask.setflags(write=False)
    return mask


def cl_components(batch: RepresentationBatch, normalization: str = "standardize") -> tuple[Tensor, ...]:
    """Unweighted CL terms: (diagonal, cc off-diagonal, sc off-diagonal, cosine)."""
    _require_batch(batch)
    mask = _off_diagonal_mask(batch.student.shape[-1])
    # the standardized student feeds both correlations
    s = _normalize(batch.student, normalization)
    c_cc = ad.batched_outer(s, _normalize(batch.teacher, normalization))
    c_sc = _symmetric_outer(s)
    cc_diag = ad.square(1.0 - ad.diagonal(c_cc)).sum(axis=-1).mean()
    cc_off = (ad.square(c_cc) * mask).sum(axis=(-1, -2)).mean()
    sc_off = (ad.square(c_sc) * mask).sum(axis=(-1, -2)).mean()
    return cc_diag, cc_off, sc_off, cosine_term(batch)


def cl_loss(
    batch: RepresentationBatch,
    weights: LossWeights = LossWeights(),
    teacher_snr_db: float | None = None,
    student_snr_db: float | None = None,
    normalization: str = "standardize",
) -> tuple[Tensor, dict]:
    """Correlation distillation loss and its component report.

    Cross- and self-correlation terms are summed over feature pairs and
    averaged over heads and frames; the cosine term is summed over heads and
    frames as in the L1/cosine loss.
    """
    lambda_cc, lambda_sc = weights.resolve(teacher_snr_db, student_snr_db)
    cc_diag, cc_off, sc_off, lcos = cl_components(batch, normalization)
    cc_off = cc_off * lambda_cc
    sc_off = sc_off * lambda_sc
    total = cc_diag + cc_off + sc_off - weights.gamma * lcos

    report = {
        "l_cc_diag": cc_diag.item(),
        "l_cc_offdiag": cc_off.item(),
        "l_sc": sc_off.item(),
        "l_cos": lcos.item(),
        "l_total": total.item(),
        "lambda_cc_eff": float(lambda_cc),
        "lambda_sc_eff": float(lambda_sc),
    }
    return total, report


def heuristic_lambda(snr_db: float) -> float:
    """SNR-driven off-diagonal weight: 5e-5 at 10 dB falling to 5e-7 at 20 dB.

    Out-of-range SNRs are clamped to [10, 20] with a warning.
    """
    lo, hi = HEURISTIC_SNR_RANGE
    s = float(snr_db)
    if not lo <= s <= hi:
        logger.warning("SNR %.3f dB outside [%g, %g]; clamping", s, lo, hi)
        s = min(max(s, lo), hi)
    return 5e-5 / (9.9 * s - 98.0)
