"""
ABMT Mean Teacher - EMA teacher weights and teacher/student divergence tracking.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Union

import numpy as np

from .encoder import EncoderState, encode_dataset, normalize_rows
from .exceptions import ContractError, DimensionError, ParameterError
from .tensor import Tensor

logger = logging.getLogger("abmt.mean_teacher")


@dataclass
class TeacherState:
    """EMA copy of the student weights; never receives gradients."""

    params: EncoderState
    alpha: float
    step: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class DivergenceTrace:
    epoch: int
    cross_branch_distance: float
    teacher_student_distance: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def init_teacher(student: EncoderState, alpha: float = 0.999) -> TeacherState:
    """Teacher starts as a deep copy of the student with gradients disabled."""
    return TeacherState(params=student.copy(requires_grad=False), alpha=alpha, step=0)


def ema_update(teacher: TeacherState, student: EncoderState) -> TeacherState:
    """
    ``theta' := alpha * theta' + (1 - alpha) * theta`` for every parameter.

    Raises:
        ContractError: parameter names or shapes differ between teacher and student
    """
    t_params = teacher.params.params
    s_params = student.params
    if t_params.keys() != s_params.keys():
        raise ContractError("teacher and student parameter sets differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ContractError(f"EMA shape mismatch for '{name}': {t.shape} vs {s.shape}")
        t.data = teacher.alpha * t.data + (1.0 - teacher.alpha) * s.data
    teacher.step += 1
    return teacher


def sync_classifiers(teacher: TeacherState, student: EncoderState) -> None:
    """Copy the student's (freshly initialized) classifiers into the teacher."""
    for name in ("classifier_a.weight", "classifier_m.weight"):
        teacher.params.params[name] = Tensor(student.params[name].data)
    teacher.params.config = student.config.model_copy()


def feature_divergence(sig_x: Union[Tensor, np.ndarray], sig_y: Union[Tensor, np.ndarray]) -> float:
    """Sum over rows of the Euclidean distance between matching rows."""
    x = sig_x.data if isinstance(sig_x, Tensor) else np.asarray(sig_x, dtype=np.float64)
    y = sig_y.data if isinstance(sig_y, Tensor) else np.asarray(sig_y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"feature_divergence: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.sqrt((diff * diff).sum(axis=1)).sum())


def record_divergence(
    teacher: Union[TeacherState, EncoderState],
    student: EncoderState,
    parts: np.ndarray,
    epoch: int,
    batch_size: int = 256,
) -> DivergenceTrace:
    """
    Measure how far apart the teacher's two branches are, and the teacher from the student.

    Args:
        teacher: Teacher (or any encoder playing the teacher)
        student: Student encoder
        parts: Target training samples, N x P x d_in
        epoch: Epoch index stored in the trace
        batch_size: Inference batch size
    """
    teacher_state = teacher.params if isinstance(teacher, TeacherState) else teacher
    t_enc = encode_dataset(teacher_state, parts, batch_size)
    s_enc = encode_dataset(student, parts, batch_size)
    trace = DivergenceTrace(
        epoch=epoch,
        cross_branch_distance=feature_divergence(normalize_rows(t_enc.f_a), normalize_rows(t_enc.f_m)),
        teacher_student_distance=feature_divergence(t_enc.signatures, s_enc.signatures),
    )
    logger.info(
        f"📏 Epoch {epoch} divergence: cross-branch {trace.cross_branch_distance:.4f}, "
        f"teacher-student {trace.teacher_student_distance:.4f}"
    )
    return trace
