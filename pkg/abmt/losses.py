"""
ABMT Losses - hard and soft objectives for source pre-training and target adaptation.

Teacher quantities enter every soft loss as constants: they arrive either as a
``FrozenOutput`` or as arrays, and a teacher tensor that still carries a graph
is rejected.
"""

import logging
from typing import Dict, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import tensor as ops
from .config import LossWeights
from .encoder import EncoderOutput, FrozenOutput
from .exceptions import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger("abmt.losses")

PROB_CLAMP = 1e-12

Constant = Union[Tensor, np.ndarray]


class TripletDistance(NamedTuple):
    """Per-anchor softmax triplet distances and which anchors had a positive and a negative."""

    values: Tensor
    valid: np.ndarray


class HardestPairs(NamedTuple):
    positive: np.ndarray
    negative: np.ndarray
    valid: np.ndarray


def _labels(labels: Sequence[int], n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {n} samples")
    return y


def _constant(value: Constant, what: str) -> np.ndarray:
    if isinstance(value, Tensor):
        if value.requires_grad:
            raise ContractError(f"{what} must be detached from the graph")
        return value.data
    return np.asarray(value, dtype=np.float64)


def mine_hardest(dist: np.ndarray, labels: np.ndarray) -> HardestPairs:
    """
    Hardest positive (farthest same label) and hardest negative (closest other label).

    Anchors without a positive or negative point at themselves and are marked invalid.
    Ties go to the lowest index.
    """
    n = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)

    positive = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    negative = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    own = np.arange(n)
    return HardestPairs(
        positive=np.where(valid, positive, own),
        negative=np.where(valid, negative, own),
        valid=valid,
    )


def cross_entropy(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean negative log-likelihood of hard labels.

    Raises:
        ContractError: a label is outside ``[0, C)``
    """
    if log_probs.ndim != 2:
        raise DimensionError(f"cross_entropy expects N x C log-probabilities, got {log_probs.shape}")
    n, c = log_probs.shape
    y = _labels(labels, n)
    if np.any((y < 0) | (y >= c)):
        raise ContractError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    return ops.neg(ops.mean(ops.pick(log_probs, y)))


def batch_hard_triplet(features: Tensor, labels: Sequence[int], margin: float = 0.3) -> Tensor:
    """
    Batch-hard triplet loss averaged over anchors with both a positive and a negative.

    Raises:
        ContractError: the batch has a single label (no negatives) or no anchor has a positive
    """
    n = features.shape[0]
    y = _labels(labels, n)
    if len(np.unique(y)) < 2:
        raise ContractError("batch_hard_triplet needs at least two labels in the batch")
    dist = ops.pairwise_distance(features)
    pairs = mine_hardest(dist.data, y)
    anchors = np.flatnonzero(pairs.valid)
    if anchors.size == 0:
        raise ContractError("no anchor in the batch has a positive sample")
    d_pos = ops.gather2d(dist, anchors, pairs.positive[anchors])
    d_neg = ops.gather2d(dist, anchors, pairs.negative[anchors])
    return ops.mean(ops.relu(d_pos - d_neg + margin))


def soft_cross_entropy(teacher_log_probs: Constant, student_log_probs: Tensor) -> Tensor:
    """Mean over the batch of ``-sum_c exp(teacher) * student``; the teacher is a constant."""
    teacher = _constant(teacher_log_probs, "teacher log-probabilities")
    if teacher.shape != student_log_probs.shape:
        raise DimensionError(
            f"soft_cross_entropy: teacher {teacher.shape} vs student {student_log_probs.shape}"
        )
    n = student_log_probs.shape[0]
    weighted = ops.mul(student_log_probs, Tensor(np.exp(teacher)))
    return ops.neg(ops.sum(weighted)) / n


def softmax_triplet_T(features: Union[Tensor, np.ndarray], labels: Sequence[int]) -> TripletDistance:  # noqa: N802
    """
    ``exp(d_pos) / (exp(d_pos) + exp(d_neg))`` per anchor with batch-hard mining.

    Computed as ``sigmoid(d_pos - d_neg)``. Invalid anchors get the value 0.5
    and ``valid[i] = False``.
    """
    x = ops.as_tensor(features)
    y = _labels(labels, x.shape[0])
    dist = ops.pairwise_distance(x)
    pairs = mine_hardest(dist.data, y)
    rows = np.arange(x.shape[0])
    d_pos = ops.gather2d(dist, rows, pairs.positive)
    d_neg = ops.gather2d(dist, rows, pairs.negative)
    return TripletDistance(values=ops.sigmoid(d_pos - d_neg), valid=pairs.valid)


def soft_triplet(
    t_teacher: Constant,
    t_student: Tensor,
    valid: Optional[np.ndarray] = None,
    literal_form: bool = False,
) -> Tensor:
    """
    Soft triplet loss between teacher and student softmax triplet distances.

    Args:
        t_teacher: Teacher distances in (0, 1), a constant
        t_student: Student distances in (0, 1)
        valid: Optional anchor mask; masked-out anchors are ignored
        literal_form: Use ``-T' log T`` only instead of the binary cross-entropy

    Raises:
        ContractError: no valid anchor remains
    """
    teacher = _constant(t_teacher, "teacher triplet distances")
    if teacher.shape != t_student.shape:
        raise DimensionError(f"soft_triplet: teacher {teacher.shape} vs student {t_student.shape}")
    keep = np.arange(teacher.shape[0]) if valid is None else np.flatnonzero(valid)
    if keep.size == 0:
        raise ContractError("soft_triplet: no valid anchors")

    target = np.clip(teacher[keep], PROB_CLAMP, 1.0 - PROB_CLAMP)
    student = ops.clamp(ops.take(t_student, keep), PROB_CLAMP, 1.0 - PROB_CLAMP)
    hit = ops.mul(ops.log(student), Tensor(target))
    if literal_form:
        return ops.neg(ops.mean(hit))
    miss = ops.mul(ops.log(1.0 - student), Tensor(1.0 - target))
    return ops.neg(ops.mean(hit + miss))


def source_objective(out: EncoderOutput, labels: Sequence[int], weights: LossWeights) -> Tensor:
    """Cross-entropy and batch-hard triplet on both branches, weighted."""
    ce = cross_entropy(out.p_a, labels) + cross_entropy(out.p_m, labels)
    tri = batch_hard_triplet(out.f_a, labels, weights.triplet_margin) + batch_hard_triplet(
        out.f_m, labels, weights.triplet_margin
    )
    return ce * weights.lambda_ce_s + tri * weights.lambda_tri_s


def _frozen(teacher_out: Union[EncoderOutput, FrozenOutput]) -> FrozenOutput:
    if isinstance(teacher_out, FrozenOutput):
        return teacher_out
    for name in ("f_a", "f_m", "p_a", "p_m"):
        if getattr(teacher_out, name).requires_grad:
            raise ContractError(f"teacher output '{name}' is attached to a graph")
    return teacher_out.freeze()


def target_terms(
    student_out: EncoderOutput,
    teacher_out: Union[EncoderOutput, FrozenOutput],
    pseudo_labels: Sequence[int],
    cross_branch: bool = True,
    literal_soft_triplet: bool = False,
) -> Dict[str, Tensor]:
    """
    Unweighted components of the adaptation objective.

    Returns:
        ``{"ce": ..., "sce": ..., "stri": ...}``. With ``cross_branch`` the
        teacher's branch A supervises the student's branch M and vice versa;
        otherwise each branch supervises its own counterpart.
    """
    teacher = _frozen(teacher_out)
    y = np.asarray(pseudo_labels, dtype=np.int64)

    ce = cross_entropy(student_out.p_a, y) + cross_entropy(student_out.p_m, y)

    # teacher source for each student branch
    p_for_a, p_for_m = (teacher.p_m, teacher.p_a) if cross_branch else (teacher.p_a, teacher.p_m)
    f_for_a, f_for_m = (teacher.f_m, teacher.f_a) if cross_branch else (teacher.f_a, teacher.f_m)

    sce = soft_cross_entropy(p_for_a, student_out.p_a) + soft_cross_entropy(p_for_m, student_out.p_m)

    student_a = softmax_triplet_T(student_out.f_a, y)
    student_m = softmax_triplet_T(student_out.f_m, y)
    teacher_for_a = softmax_triplet_T(f_for_a, y).values.data
    teacher_for_m = softmax_triplet_T(f_for_m, y).values.data
    stri = soft_triplet(
        teacher_for_a, student_a.values, student_a.valid, literal_soft_triplet
    ) + soft_triplet(teacher_for_m, student_m.values, student_m.valid, literal_soft_triplet)

    return {"ce": ce, "sce": sce, "stri": stri}


def target_objective(
    student_out: EncoderOutput,
    teacher_out: Union[EncoderOutput, FrozenOutput],
    pseudo_labels: Sequence[int],
    weights: LossWeights,
    cross_branch: bool = True,
    literal_soft_triplet: bool = False,
) -> Tensor:
    """Weighted sum of hard CE, soft CE and soft triplet terms."""
    terms = target_terms(
        student_out,
        teacher_out,
        pseudo_labels,
        cross_branch=cross_branch,
        literal_soft_triplet=literal_soft_triplet,
    )
    return weighted_target(terms, weights)


def weighted_target(terms: Dict[str, Tensor], weights: LossWeights) -> Tensor:
    return (
        terms["ce"] * weights.lambda_ce_t
        + terms["sce"] * weights.lambda_sce_t
        + terms["stri"] * weights.lambda_stri_t
    )
