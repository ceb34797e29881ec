"""Correlation-based knowledge distillation for noise-robust speech representations."""
from .augment import AudioBuffer, DistortionPlan, DistortionSpec, apply_plan, logmel_frontend, mix_at_snr
from .autodiff import GradientTape, Tensor, finite_diff_check
from .estimator import CorrelationDistiller
from .losses import LossWeights, RepresentationBatch, bt_loss, cl_loss, cross_corr, heuristic_lambda, kd_loss, self_corr
from .models import EncoderConfig, StudentModel, TeacherModel, init_student_from_teacher
from .probe import ForestConfig, RandomForestProbe, run_probe
from .trainer import TrainingConfig, select_checkpoint, train_distill

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "DistortionPlan", "DistortionSpec", "apply_plan", "logmel_frontend", "mix_at_snr",
    "GradientTape", "Tensor", "finite_diff_check", "CorrelationDistiller",
    "LossWeights", "RepresentationBatch", "bt_loss", "cl_loss", "cross_corr", "heuristic_lambda",
    "kd_loss", "self_corr", "EncoderConfig", "StudentModel", "TeacherModel",
    "init_student_from_teacher", "ForestConfig", "RandomForestProbe", "run_probe",
    "TrainingConfig", "select_checkpoint", "train_distill",
]
