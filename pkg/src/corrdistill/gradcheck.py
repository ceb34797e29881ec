"""Finite-difference verification of every loss and of the student forward pass."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import LossWeights, RepresentationBatch, bt_loss, cl_components, cl_loss, kd_loss
from .models import EncoderConfig, StudentModel

TOL = 1e-4
STEP = 1e-5

# unweighted CL terms, checked one by one so the small off-diagonal weights
# cannot hide an error behind the diagonal term
CL_COMPONENTS = ("cl_diag_only", "cl_cc_offdiag", "cl_sc_offdiag", "cl_cosine")


@dataclass
class SuiteResult:
    max_errors: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{name:<16} max_rel_err={err:.3e} {'PASS' if err < TOL else 'FAIL'}"
               for name, err in self.max_errors.items()]
        out += [f"FAILED {f}" for f in self.failures]
        out.append(f"elapsed {self.seconds:.1f}s")
        return out


def random_batch_shape(rng: np.random.Generator) -> tuple[int, int, int, int]:
    # B=2 standardizes every column to +-1, leaving only epsilon-sized gradients
    return int(rng.integers(3, 9)), 3, int(rng.integers(1, 6)), int(rng.integers(2, 17))


def _off_kink(student: np.ndarray, teacher: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries away from |s - t| = 0, where the L1 term has no derivative."""
    diff = student - teacher
    close = np.abs(diff) < margin
    return np.where(close, teacher + np.where(diff < 0, -margin, margin), student)


def _record(result: SuiteResult, name: str, seed: int, report: ad.GradCheckReport) -> None:
    result.max_errors[name] = max(result.max_errors.get(name, 0.0), report.max_error)
    if not report.passed:
        bad = [i for i, e in enumerate(report.errors) if not e < report.tol] or ["?"]
        result.failures.append(f"{name} seed={seed} params={bad} {report.message}".rstrip())


def loss_checks(seed: int, result: SuiteResult) -> None:
    rng = np.random.default_rng([seed, 77])
    shape = random_batch_shape(rng)
    teacher = rng.normal(size=shape)
    student = ad.Tensor(_off_kink(rng.normal(size=shape), teacher), requires_grad=True)

    report = ad.finite_diff_check(lambda s: kd_loss(RepresentationBatch(s, teacher), 1.0), [student], STEP, TOL)
    _record(result, "kd", seed, report)

    y1 = ad.Tensor(rng.normal(size=shape[:1] + shape[-1:]), requires_grad=True)
    y2 = ad.Tensor(rng.normal(size=y1.shape), requires_grad=True)
    report = ad.finite_diff_check(lambda a, b: bt_loss(a, b, 5e-3), [y1, y2], STEP, TOL)
    _record(result, "bt", seed, report)

    report = ad.finite_diff_check(lambda s: cl_loss(RepresentationBatch(s, teacher))[0], [student], STEP, TOL)
    _record(result, "cl", seed, report)

    reports = ad.finite_diff_check_many(
        lambda s: cl_components(RepresentationBatch(s, teacher)), [student], STEP, TOL
    )
    for name, report in zip(CL_COMPONENTS, reports):
        _record(result, name, seed, report)

    heuristic = LossWeights(heuristic=True)
    snrs = rng.uniform(10, 20, size=2)
    report = ad.finite_diff_check(
        lambda s: cl_loss(RepresentationBatch(s, teacher), heuristic, *snrs)[0], [student], STEP, TOL
    )
    _record(result, "cl_heuristic", seed, report)


def model_check(seed: int, result: SuiteResult) -> None:
    """Gradient of sum(H_hat) with respect to every student parameter."""
    cfg = EncoderConfig(input_dim=5, model_dim=4, n_blocks=2, n_heads=2, mlp_dim=6, seed=seed,
                        feature_mean=0.0, feature_std=1.0)
    student = StudentModel(cfg)
    x = np.random.default_rng([seed, 78]).normal(size=(2, 3, 5))
    report = ad.finite_diff_check(lambda *_: student(x)[1].sum(), student.parameters(), STEP, TOL)
    _record(result, "student_forward", seed, report)


def run_suite(n_seeds: int = 20, n_model_seeds: int = 3) -> SuiteResult:
    start = time.perf_counter()
    result = SuiteResult()
    for seed in range(n_seeds):
        loss_checks(seed, result)
    for seed in range(n_model_seeds):
        model_check(seed, result)
    result.seconds = time.perf_counter() - start
    return result
