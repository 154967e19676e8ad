"""
ABMT Trainer - source pre-training, target adaptation and run artifacts.

Adaptation epoch:
    1. cluster teacher signatures of the target training set
    2. rebuild both classifiers (student and teacher) from the cluster means
    3. per iteration: PK batch of clustered samples, part erasing on the
       student input, target objective, Adam step, EMA update
    4. record teacher/student divergence
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import Dataset, part_erasing, sample_pk_batch
from .encoder import EncoderState, build_encoder, encode_dataset, forward, init_dynamic_classifiers
from .evaluation import RetrievalMetrics, RetrievalSplit, evaluate
from .exceptions import ContractError, DegenerateClusteringError, ParameterError
from .logging_config import timed_stage
from .losses import source_objective, target_terms, weighted_target
from .mean_teacher import (
    DivergenceTrace,
    TeacherState,
    ema_update,
    init_teacher,
    record_divergence,
    sync_classifiers,
)
from .optim import Adam, default_milestones, step_decay_lr
from .pseudo_labels import generate_pseudo_labels, write_labeling_csv
from .tensor import backward, no_grad

logger = logging.getLogger("abmt.trainer")

StepCallback = Callable[[int, int, EncoderState, TeacherState], None]

RUN_LOG_COLUMNS = [
    "epoch",
    "num_clusters",
    "num_outliers",
    "loss_ce",
    "loss_sce",
    "loss_stri",
    "loss_total",
    "cross_branch_distance",
    "teacher_student_distance",
]


class EpochStatus(Enum):
    COMPLETED = "completed"
    SKIPPED = "skipped"


@dataclass
class EpochRecord:
    """Outcome of one adaptation epoch."""

    epoch: int
    status: EpochStatus = EpochStatus.COMPLETED
    num_clusters: int = 0
    num_outliers: int = 0
    eps: Optional[float] = None
    losses: Dict[str, float] = field(default_factory=dict)
    duration: float = 0.0
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "status": self.status.value,
            "num_clusters": self.num_clusters,
            "num_outliers": self.num_outliers,
            "eps": self.eps,
            "losses": self.losses,
            "duration": self.duration,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EpochRecord":
        return cls(**{**data, "status": EpochStatus(data["status"])})


@dataclass
class MetricsReport:
    """Everything a run reports: config echo, seed, traces and final metrics."""

    config: Dict[str, Any]
    seed: int
    mode: str = "adapt"
    pretrain_losses: List[float] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)
    divergence: List[DivergenceTrace] = field(default_factory=list)
    final_metrics: Optional[Dict[str, Any]] = None
    direct_transfer: Optional[Dict[str, Any]] = None

    @property
    def completed_epochs(self) -> List[EpochRecord]:
        return [e for e in self.epochs if e.status == EpochStatus.COMPLETED]

    @property
    def skipped_epochs(self) -> int:
        return len(self.epochs) - len(self.completed_epochs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "seed": self.seed,
            "mode": self.mode,
            "pretrain_losses": self.pretrain_losses,
            "epochs": [e.to_dict() for e in self.epochs],
            "divergence": [d.to_dict() for d in self.divergence],
            "final_metrics": self.final_metrics,
            "direct_transfer": self.direct_transfer,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(
            config=data["config"],
            seed=data["seed"],
            mode=data.get("mode", "adapt"),
            pretrain_losses=list(data.get("pretrain_losses", [])),
            epochs=[EpochRecord.from_dict(e) for e in data.get("epochs", [])],
            divergence=[DivergenceTrace(**d) for d in data.get("divergence", [])],
            final_metrics=data.get("final_metrics"),
            direct_transfer=data.get("direct_transfer"),
        )

    def run_log_rows(self) -> List[Dict[str, Any]]:
        """One row per completed epoch."""
        by_epoch = {d.epoch: d for d in self.divergence}
        rows = []
        for record in self.completed_epochs:
            trace = by_epoch.get(record.epoch)
            rows.append(
                {
                    "epoch": record.epoch,
                    "num_clusters": record.num_clusters,
                    "num_outliers": record.num_outliers,
                    "loss_ce": record.losses.get("ce"),
                    "loss_sce": record.losses.get("sce"),
                    "loss_stri": record.losses.get("stri"),
                    "loss_total": record.losses.get("total"),
                    "cross_branch_distance": trace.cross_branch_distance if trace else None,
                    "teacher_student_distance": trace.teacher_student_distance if trace else None,
                }
            )
        return rows


def _dense_labels(ids: np.ndarray) -> Tuple[np.ndarray, int]:
    classes, labels = np.unique(ids, return_inverse=True)
    return labels.astype(np.int64), len(classes)


def pretrain_source(
    config: TrainConfig,
    source: Dataset,
    seed: int,
    loss_trace: Optional[List[float]] = None,
) -> EncoderState:
    """
    Supervised training on the labeled source domain.

    Args:
        config: Run configuration
        source: Labeled source dataset (``train`` split is used)
        seed: Seeds the encoder init and the batch sampler
        loss_trace: If given, the loss of every iteration is appended

    Returns:
        The pre-trained encoder
    """
    train = source.subset("train")
    labels, num_classes = _dense_labels(train.ids)
    if num_classes < 2:
        raise ContractError("source pre-training needs at least two identities")

    encoder_config = config.encoder.model_copy(update={"num_classes": num_classes, "d_in": train.d_in})
    state = build_encoder(encoder_config, seed)
    optimizer = Adam(lr=config.lr, weight_decay=config.weight_decay)
    milestones = config.lr_decay_epochs or default_milestones(config.epochs_pretrain)
    rng = np.random.default_rng([seed, 1])

    logger.info(
        f"🚀 Source pre-training: {len(train)} samples, {num_classes} ids, "
        f"{config.epochs_pretrain}x{config.iters_pretrain} iterations, lr decay at {milestones}"
    )
    for epoch in range(config.epochs_pretrain):
        optimizer.set_lr(step_decay_lr(config.lr, epoch, milestones, config.lr_decay_gamma))
        epoch_losses = []
        with timed_stage(logger, f"pre-training epoch {epoch}", level=logging.DEBUG):
            for iteration in range(config.iters_pretrain):
                idx = sample_pk_batch(labels, config.batch_identities, config.instances_per_identity, rng)
                batch = part_erasing(train.parts[idx], config.part_erasing_prob, rng)
                loss = source_objective(forward(state, batch), labels[idx], config.loss_weights)
                backward(loss)
                optimizer.step(state.params)
                epoch_losses.append(loss.item())
                logger.debug(f"🔧 epoch {epoch} iter {iteration}: loss {epoch_losses[-1]:.5f}")
        if loss_trace is not None:
            loss_trace.extend(epoch_losses)
        logger.info(f"📈 Pre-training epoch {epoch}: mean loss {np.mean(epoch_losses):.4f} (lr={optimizer.lr:.2e})")

    logger.info("✅ Source pre-training finished")
    return state


def run_eval(
    state: Union[EncoderState, TeacherState],
    target: Dataset,
    ranks: Tuple[int, ...] = (1, 5, 10),
    batch_size: int = 256,
) -> RetrievalMetrics:
    """Signatures of the target query and gallery splits, scored with mAP and CMC."""
    encoder = state.params if isinstance(state, TeacherState) else state
    query = target.subset("query")
    gallery = target.subset("gallery")
    with timed_stage(logger, f"evaluation of {len(query)} queries", level=logging.DEBUG):
        split = RetrievalSplit(
            query_sigs=encode_dataset(encoder, query.parts, batch_size).signatures,
            gallery_sigs=encode_dataset(encoder, gallery.parts, batch_size).signatures,
            query_ids=query.ids,
            gallery_ids=gallery.ids,
            query_cams=query.cams,
            gallery_cams=gallery.cams,
        )
        return evaluate(split, ranks)


def _check_architecture(m_pre: EncoderState, config: TrainConfig) -> None:
    have, want = m_pre.config.architecture(), config.encoder.architecture()
    mismatched = [f"{k}: checkpoint {have[k]!r}, config {want[k]!r}" for k in want if have[k] != want[k]]
    if mismatched:
        detail = "; ".join(mismatched)
        raise ParameterError(f"pre-trained encoder does not match the run configuration ({detail})")


def adapt_target(
    config: TrainConfig,
    m_pre: Optional[EncoderState],
    source: Optional[Dataset],
    target: Dataset,
    seed: int,
    run_dir: Optional[Union[str, Path]] = None,
    step_callback: Optional[StepCallback] = None,
    evaluate_direct: bool = True,
) -> Tuple[EncoderState, MetricsReport]:
    """
    Unsupervised adaptation of ``m_pre`` (or a fresh encoder) to ``target``.

    Args:
        config: Run configuration
        m_pre: Pre-trained encoder; ``None`` (or ``source_pretrain=False``) starts from a fresh encoder
        source: Source data, only used when re-ranking with source samples
        target: Target dataset with train/query/gallery splits
        seed: Seeds the sampler, the erasing and K-Means++
        run_dir: Where per-epoch label dumps go when ``config.dump_labels``
        step_callback: Called as ``(epoch, iteration, student, teacher)`` after every EMA update
        evaluate_direct: Evaluate the starting encoder on the target first

    Returns:
        (teacher encoder, report)

    Raises:
        ParameterError: ``m_pre`` was built with a different architecture than ``config.encoder``
        DegenerateClusteringError: more than ``max_skipped_fraction`` of epochs were skipped
    """
    train = target.subset("train")
    if len(train) == 0:
        raise ContractError("target has no training samples")

    if m_pre is None or not config.source_pretrain:
        encoder_config = config.encoder.model_copy(update={"d_in": train.d_in})
        student = build_encoder(encoder_config, seed)
        logger.info("🆕 No source pre-training, adapting a fresh encoder")
    else:
        _check_architecture(m_pre, config)
        student = m_pre.copy(requires_grad=True)

    report = MetricsReport(config=config.model_dump(mode="json"), seed=seed)
    if evaluate_direct:
        report.direct_transfer = run_eval(student, target, tuple(config.eval_ranks), config.eval_batch_size).model_dump()

    teacher = init_teacher(student, config.alpha)
    optimizer = Adam(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([seed, 2])
    label_dir = Path(run_dir) / "labels" if run_dir is not None and config.dump_labels else None

    logger.info(
        f"🚀 Target adaptation: {len(train)} samples, {config.epochs_adapt}x{config.iters_adapt} iterations, "
        f"method={config.clustering_method}, cross_branch={config.use_cross_branch}, "
        f"asymmetric={student.config.asymmetric}"
    )
    for epoch in range(config.epochs_adapt):
        start = time.time()
        try:
            labeling = generate_pseudo_labels(
                teacher,
                target,
                config.cluster,
                config.clustering_method,
                source=source,
                seed=seed + epoch,
                batch_size=config.eval_batch_size,
            )
        except DegenerateClusteringError as e:
            logger.warning(f"⚠️  Epoch {epoch} skipped: {e}")
            report.epochs.append(
                EpochRecord(epoch=epoch, status=EpochStatus.SKIPPED, duration=time.time() - start, error=str(e))
            )
            continue

        init_dynamic_classifiers(student, labeling.means_a, labeling.means_m, optimizer)
        sync_classifiers(teacher, student)
        if label_dir is not None:
            write_labeling_csv(labeling, label_dir / f"epoch_{epoch:03d}.csv")

        sums = {"ce": 0.0, "sce": 0.0, "stri": 0.0, "total": 0.0}
        assignment = labeling.assignment
        for iteration in range(config.iters_adapt):
            idx = sample_pk_batch(assignment, config.batch_identities, config.instances_per_identity, rng)
            clean = train.parts[idx]
            student_input = part_erasing(clean, config.part_erasing_prob, rng)
            teacher_input = student_input if config.equal_augmentation else clean

            with no_grad():
                teacher_out = forward(teacher.params, teacher_input).freeze()
            terms = target_terms(
                forward(student, student_input),
                teacher_out,
                assignment[idx],
                cross_branch=config.use_cross_branch,
                literal_soft_triplet=config.literal_soft_triplet,
            )
            loss = weighted_target(terms, config.loss_weights)
            backward(loss)
            optimizer.step(student.params)
            ema_update(teacher, student)

            for name, value in terms.items():
                sums[name] += value.item()
            sums["total"] += loss.item()
            if step_callback is not None:
                step_callback(epoch, iteration, student, teacher)

        trace = record_divergence(teacher, student, train.parts, epoch, config.eval_batch_size)
        report.divergence.append(trace)
        record = EpochRecord(
            epoch=epoch,
            num_clusters=labeling.k,
            num_outliers=labeling.num_outliers,
            eps=labeling.eps,
            losses={name: total / config.iters_adapt for name, total in sums.items()},
            duration=time.time() - start,
        )
        report.epochs.append(record)
        logger.info(
            f"📈 Adaptation epoch {epoch}: loss {record.losses['total']:.4f} "
            f"(ce {record.losses['ce']:.4f}, sce {record.losses['sce']:.4f}, stri {record.losses['stri']:.4f}), "
            f"{record.num_clusters} clusters, {record.duration:.2f}s"
        )

    if report.skipped_epochs > config.max_skipped_fraction * config.epochs_adapt:
        logger.error(f"❌ {report.skipped_epochs} of {config.epochs_adapt} epochs skipped")
        raise DegenerateClusteringError(
            f"{report.skipped_epochs} of {config.epochs_adapt} adaptation epochs had degenerate clustering"
        )

    report.final_metrics = run_eval(teacher, target, tuple(config.eval_ranks), config.eval_batch_size).model_dump()
    logger.info(f"✅ Adaptation finished: mAP {report.final_metrics['mAP']:.4f}")
    return teacher.params, report


def write_run_artifacts(run_dir: Union[str, Path], state: EncoderState, report: MetricsReport) -> Dict[str, Path]:
    """
    Write ``checkpoint.npz``, ``metrics.json``, ``run_log.csv`` and ``report.json``.

    Returns:
        Mapping of artifact name to written path
    """
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": save_checkpoint(state, out / "checkpoint.npz", extra={"seed": report.seed})}

    paths["metrics"] = out / "metrics.json"
    paths["metrics"].write_text(json.dumps(report.final_metrics, indent=2) + "\n", encoding="utf-8")

    paths["run_log"] = out / "run_log.csv"
    with open(paths["run_log"], "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RUN_LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(report.run_log_rows())

    paths["report"] = out / "report.json"
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info(f"💾 Run artifacts written to {out}")
    return paths


def load_report(path: Union[str, Path]) -> MetricsReport:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Report not found: {path}")
    return MetricsReport.from_dict(json.loads(source.read_text(encoding="utf-8")))
