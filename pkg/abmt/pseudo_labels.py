"""
ABMT Pseudo Labels - hard labels for the unlabeled target domain.

Pipeline per epoch::

    teacher signatures -> pairwise Euclidean -> k-reciprocal re-ranking
                       -> DBSCAN (outliers = -1) -> normalized cluster means

K-Means++ on the signatures replaces the last three stages for the
clustering ablation.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Set, Tuple, Union

import numpy as np

from .config import ClusterConfig
from .data import Dataset
from .encoder import EncoderState, encode_dataset, normalize_rows
from .exceptions import DegenerateClusteringError, DimensionError, ParameterError
from .logging_config import timed_stage
from .mean_teacher import TeacherState
from .tensor import Tensor

logger = logging.getLogger("abmt.pseudo_labels")

METHODS = ("dbscan_rerank", "kmeans")


@dataclass
class DistanceMatrix:
    """Square matrix of non-negative finite distances."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise DimensionError(f"distance matrix must be square, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DimensionError("distance matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class PseudoLabeling:
    """Cluster assignment of the target training set plus normalized cluster means."""

    assignment: np.ndarray
    k: int
    means_a: Tensor
    means_m: Tensor
    method: str = "dbscan_rerank"
    eps: Optional[float] = None

    @property
    def outliers(self) -> np.ndarray:
        return self.assignment < 0

    @property
    def num_outliers(self) -> int:
        return int(self.outliers.sum())

    def to_rows(self) -> List[Tuple[int, int, int]]:
        """``(sample_index, pseudo_label, is_outlier)`` per sample."""
        return [(i, int(label), int(label < 0)) for i, label in enumerate(self.assignment)]


class ClusterMeans(NamedTuple):
    means_a: Tensor
    means_m: Tensor
    assignment: np.ndarray


def write_labeling_csv(labeling: PseudoLabeling, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_index", "pseudo_label", "is_outlier"])
        writer.writerows(labeling.to_rows())
    return target


def pairwise_euclidean(signatures: Union[Tensor, np.ndarray]) -> DistanceMatrix:
    """Euclidean distances from explicit differences (exactly symmetric, zero diagonal)."""
    x = signatures.data if isinstance(signatures, Tensor) else np.asarray(signatures, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"pairwise_euclidean expects N x D with N >= 1, got {x.shape}")
    diff = x[:, None, :] - x[None, :, :]
    return DistanceMatrix(np.sqrt((diff * diff).sum(axis=2)))


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking
# ---------------------------------------------------------------------------


def effective_neighbors(n: int, cfg: ClusterConfig) -> Tuple[int, int]:
    """
    ``(k1, k2)`` usable for ``n`` samples.

    Raises:
        ParameterError: ``n <= k1`` and clamping is disabled, or ``n < 2``
    """
    if n < 2:
        raise ParameterError(f"re-ranking needs at least 2 samples, got {n}")
    k1, k2 = cfg.k1, cfg.k2
    if n <= k1:
        if not cfg.clamp_k1:
            raise ParameterError(f"k1={k1} needs more than {k1} samples, got {n}")
        k1 = n - 1
        k2 = min(k2, k1)
        logger.warning(f"⚠️  Clamped re-ranking neighbors to k1={k1}, k2={k2} for {n} samples")
    return k1, k2


def _reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_rerank(dist: DistanceMatrix, cfg: ClusterConfig) -> DistanceMatrix:
    """
    Blend the input distance with the Jaccard distance of k-reciprocal encodings.

    For each sample the k1-reciprocal set is expanded with the half-k1
    reciprocal sets of its members whose overlap with it is at least 2/3.
    Members are weighted by ``exp(-d^2 / max_row d^2)`` and normalized; the
    encodings are averaged over the k2 nearest neighbors, and
    ``d_J = 1 - sum(min) / sum(max)``. The result
    ``lambda * d + (1 - lambda) * d_J`` is symmetrized and has a zero diagonal.
    """
    d = dist.values
    n = dist.n
    k1, k2 = effective_neighbors(n, cfg)
    half = int(np.around(k1 / 2.0))

    squared = d * d
    row_max = squared.max(axis=1, keepdims=True)
    scaled = squared / np.where(row_max > 0, row_max, 1.0)
    initial_rank = np.argsort(d, axis=1, kind="stable")

    encoding = np.zeros((n, n))
    for i in range(n):
        reciprocal = _reciprocal(initial_rank, i, k1)
        members = set(reciprocal.tolist())
        expansion: Set[int] = set(members)
        for candidate in reciprocal:
            candidate_set = _reciprocal(initial_rank, int(candidate), half)
            overlap = len(members.intersection(candidate_set.tolist()))
            if overlap >= 2.0 / 3.0 * len(candidate_set):
                expansion.update(candidate_set.tolist())
        index = np.array(sorted(expansion), dtype=np.int64)
        weight = np.exp(-scaled[i, index])
        encoding[i, index] = weight / weight.sum()

    if k2 > 1:
        encoding = np.stack([encoding[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((n, n))
    for i in range(n):
        overlap = np.minimum(encoding[i], encoding).sum(axis=1)
        union = np.maximum(encoding[i], encoding).sum(axis=1)
        # two empty encodings count as identical
        jaccard[i] = 1.0 - np.divide(overlap, union, out=np.ones(n), where=union > 0)
    np.clip(jaccard, 0.0, 1.0, out=jaccard)

    lam = cfg.lambda_rerank
    blended = lam * d + (1.0 - lam) * jaccard
    final = (blended + blended.T) / 2.0
    np.fill_diagonal(final, 0.0)
    logger.debug(f"🔁 Re-ranked {n} samples with k1={k1}, k2={k2}, lambda={lam}")
    return DistanceMatrix(final)


# ---------------------------------------------------------------------------
# density clustering
# ---------------------------------------------------------------------------


def select_eps(dist: DistanceMatrix, cfg: ClusterConfig) -> float:
    """
    DBSCAN radius for this epoch.

    ``core_quantile`` takes the ``eps_quantile`` quantile of each sample's
    distance to its ``(min_pts - 1)``-th nearest other sample;
    ``pair_quantile`` the quantile of all positive pairwise distances;
    ``absolute`` returns ``cfg.eps``. A quantile over no positive values falls
    back to ``cfg.eps``.
    """
    if cfg.eps_mode == "absolute":
        return cfg.eps
    values = dist.values
    n = dist.n
    if cfg.eps_mode == "core_quantile":
        if n < cfg.min_pts:
            raise DegenerateClusteringError(f"{n} samples cannot form a cluster of {cfg.min_pts}")
        others = np.where(np.eye(n, dtype=bool), np.inf, values)
        candidates = np.sort(others, axis=1)[:, cfg.min_pts - 2]
    else:
        candidates = values[np.triu_indices(n, k=1)]
    positive = candidates[candidates > 0]
    if positive.size == 0:
        logger.warning(f"⚠️  No positive distances for eps selection, using eps={cfg.eps}")
        return cfg.eps
    return float(np.quantile(positive, cfg.eps_quantile))


def _dense(assignment: np.ndarray) -> Tuple[np.ndarray, int]:
    labels = np.full(assignment.shape, -1, dtype=np.int64)
    ids = np.unique(assignment[assignment >= 0])
    for new, old in enumerate(ids):
        labels[assignment == old] = new
    return labels, len(ids)


def dbscan(dist: DistanceMatrix, eps: float, min_pts: int) -> np.ndarray:
    """
    DBSCAN over a precomputed distance matrix.

    Neighborhoods are ``{j : d[i, j] <= eps}`` including ``i``; cores have at
    least ``min_pts`` neighbors. Clusters are grown from cores in index order,
    so a border point joins the first cluster that reaches it. Clusters left
    with fewer than ``min_pts`` members become noise and ids are made dense.

    Returns:
        integer labels, -1 for noise
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if min_pts < 2:
        raise ParameterError(f"min_pts must be >= 2, got {min_pts}")
    n = dist.n
    neighbors = [np.flatnonzero(dist.values[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors], dtype=bool)

    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        frontier = [seed]
        while frontier:
            point = frontier.pop(0)
            for q in neighbors[point]:
                if labels[q] != -1:
                    continue
                labels[q] = cluster
                if core[q]:
                    frontier.append(q)
        cluster += 1

    sizes = np.bincount(labels[labels >= 0], minlength=cluster)
    for small in np.flatnonzero(sizes < min_pts):
        labels[labels == small] = -1
    labels, k = _dense(labels)
    logger.debug(f"🧩 DBSCAN(eps={eps:.4f}, min_pts={min_pts}): {k} clusters, {int((labels < 0).sum())} noise")
    return labels


# ---------------------------------------------------------------------------
# K-Means++
# ---------------------------------------------------------------------------


def _squared_to_centers(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def kmeans_pp(
    signatures: Union[Tensor, np.ndarray],
    k: int,
    seed: int,
    max_iter: int = 100,
    trace: Optional[List[float]] = None,
) -> np.ndarray:
    """
    K-Means++ seeding followed by Lloyd iterations until the assignment stops changing.

    Args:
        signatures: N x D points
        k: Cluster count, ``2 <= k <= N``
        seed: Seed of the D^2 sampling
        max_iter: Upper bound on Lloyd iterations
        trace: If given, the inertia after every Lloyd iteration is appended

    Returns:
        cluster index per point (every point assigned)
    """
    x = signatures.data if isinstance(signatures, Tensor) else np.asarray(signatures, dtype=np.float64)
    n = x.shape[0]
    if not 2 <= k <= n:
        raise ParameterError(f"kmeans needs 2 <= k <= N, got k={k}, N={n}")

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = _squared_to_centers(x, x[chosen]).min(axis=1)
    while len(chosen) < k:
        total = nearest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=nearest / total))
        else:
            # every point coincides with a center
            pick = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(pick)
        nearest = np.minimum(nearest, _squared_to_centers(x, x[[pick]])[:, 0])

    centers = x[chosen].copy()
    assignment = _squared_to_centers(x, centers).argmin(axis=1)
    for iteration in range(max_iter):
        for c in range(k):
            members = assignment == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        distances = _squared_to_centers(x, centers)
        updated = distances.argmin(axis=1)
        if trace is not None:
            trace.append(float(distances[np.arange(n), updated].sum()))
        if np.array_equal(updated, assignment):
            logger.debug(f"🎯 K-Means++ converged after {iteration + 1} iterations")
            break
        assignment = updated
    return assignment.astype(np.int64)


# ---------------------------------------------------------------------------
# cluster means and the epoch entry point
# ---------------------------------------------------------------------------


def cluster_means(
    f_a: Union[Tensor, np.ndarray], f_m: Union[Tensor, np.ndarray], assignment: np.ndarray
) -> ClusterMeans:
    """
    Normalized per-cluster means of both branches; noise is ignored.

    Raises:
        DegenerateClusteringError: every sample is noise
    """
    a = f_a.data if isinstance(f_a, Tensor) else np.asarray(f_a, dtype=np.float64)
    m = f_m.data if isinstance(f_m, Tensor) else np.asarray(f_m, dtype=np.float64)
    labels, k = _dense(np.asarray(assignment, dtype=np.int64))
    if k == 0:
        raise DegenerateClusteringError("every sample was marked as an outlier")
    means_a = np.stack([a[labels == c].mean(axis=0) for c in range(k)])
    means_m = np.stack([m[labels == c].mean(axis=0) for c in range(k)])
    return ClusterMeans(
        means_a=Tensor(normalize_rows(means_a)), means_m=Tensor(normalize_rows(means_m)), assignment=labels
    )


def kmeans_cluster_count(n: int, cfg: ClusterConfig) -> int:
    k = cfg.kmeans_k if cfg.kmeans_k is not None else max(2, n // cfg.kmeans_images_per_cluster)
    return min(k, n)


def generate_pseudo_labels(
    teacher: Union[TeacherState, EncoderState],
    target: Dataset,
    cfg: ClusterConfig,
    method: str = "dbscan_rerank",
    source: Optional[Dataset] = None,
    seed: int = 0,
    batch_size: int = 256,
) -> PseudoLabeling:
    """
    Cluster the teacher's signatures of the target training set.

    Args:
        teacher: Teacher network used in inference mode
        target: Target dataset; only its ``train`` split is clustered
        cfg: Clustering parameters
        method: ``dbscan_rerank`` or ``kmeans``
        source: Source data appended before re-ranking when ``cfg.rerank_with_source``
        seed: Seed of the K-Means++ seeding
        batch_size: Inference batch size

    Raises:
        DegenerateClusteringError: fewer than two clusters were found
    """
    if method not in METHODS:
        raise ParameterError(f"Unknown clustering method: {method}")
    state = teacher.params if isinstance(teacher, TeacherState) else teacher
    train = target.subset("train")
    encoded = encode_dataset(state, train.parts, batch_size)
    n = len(train)

    eps: Optional[float] = None
    with timed_stage(logger, f"{method} clustering of {n} samples", level=logging.DEBUG):
        if method == "dbscan_rerank":
            sigs = encoded.signatures
            if cfg.rerank_with_source and source is not None:
                source_sigs = encode_dataset(state, source.subset("train").parts, batch_size).signatures
                sigs = np.concatenate([sigs, source_sigs])
            reranked = k_reciprocal_rerank(pairwise_euclidean(sigs), cfg)
            block = DistanceMatrix(reranked.values[:n, :n])
            eps = select_eps(block, cfg)
            assignment = dbscan(block, eps, cfg.min_pts)
        else:
            assignment = kmeans_pp(
                encoded.signatures, kmeans_cluster_count(n, cfg), seed, cfg.kmeans_max_iter
            )

    k = len(np.unique(assignment[assignment >= 0]))
    if k < 2:
        raise DegenerateClusteringError(f"{method} produced {k} clusters for {n} samples")
    means = cluster_means(encoded.f_a, encoded.f_m, assignment)
    labeling = PseudoLabeling(
        assignment=means.assignment,
        k=k,
        means_a=means.means_a,
        means_m=means.means_m,
        method=method,
        eps=eps,
    )
    eps_note = f", eps={eps:.4f}" if eps is not None else ""
    logger.info(f"🧩 Pseudo labels: {k} clusters, {labeling.num_outliers} outliers of {n}{eps_note}")
    return labeling
