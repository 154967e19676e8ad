"""
ABMT Evaluation - CMC and mAP for query/gallery retrieval.

Gallery entries sharing both identity and camera with the query are removed
before ranking; the remaining same-identity entries are the relevant ones.
Distances are always plain Euclidean on the signatures.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import DimensionError, EvaluationError

logger = logging.getLogger("abmt.evaluation")


@dataclass
class RetrievalSplit:
    query_sigs: np.ndarray
    gallery_sigs: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self) -> None:
        self.query_sigs = np.asarray(self.query_sigs, dtype=np.float64)
        self.gallery_sigs = np.asarray(self.gallery_sigs, dtype=np.float64)
        for name in ("query_ids", "gallery_ids", "query_cams", "gallery_cams"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        nq, ng = len(self.query_sigs), len(self.gallery_sigs)
        if not (len(self.query_ids) == len(self.query_cams) == nq):
            raise DimensionError("query ids/cams do not match the query signatures")
        if not (len(self.gallery_ids) == len(self.gallery_cams) == ng):
            raise DimensionError("gallery ids/cams do not match the gallery signatures")
        if nq and ng and self.query_sigs.shape[1] != self.gallery_sigs.shape[1]:
            raise DimensionError("query and gallery signatures differ in width")

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)


class RetrievalMetrics(BaseModel):
    """Metrics JSON: ``{mAP, cmc: {rank: value}, num_queries, num_skipped}``."""

    mAP: float = Field(ge=0, le=1)
    cmc: Dict[int, float]
    num_queries: int = Field(ge=0)
    num_skipped: int = Field(ge=0)


class QueryResult(NamedTuple):
    average_precision: float
    first_hit: int  # 0-based rank of the first relevant item


def pairwise_query_gallery(split: RetrievalSplit) -> np.ndarray:
    diff = split.query_sigs[:, None, :] - split.gallery_sigs[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def rank_gallery(split: RetrievalSplit, q: int, dist: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Valid gallery indices sorted by distance to query ``q`` (ties by index).

    Raises:
        EvaluationError: no gallery entry survives the same-id-same-cam exclusion
    """
    row = pairwise_query_gallery(split)[q] if dist is None else dist[q]
    same_id = split.gallery_ids == split.query_ids[q]
    same_cam = split.gallery_cams == split.query_cams[q]
    valid = np.flatnonzero(~(same_id & same_cam))
    if valid.size == 0:
        raise EvaluationError(f"query {q} has an empty gallery after exclusion")
    return valid[np.argsort(row[valid], kind="stable")]


def average_precision(relevant: np.ndarray) -> float:
    """AP of a ranked boolean relevance vector with at least one hit."""
    hits = np.cumsum(relevant)
    positions = np.flatnonzero(relevant)
    return float((hits[positions] / (positions + 1)).mean())


def _query_results(split: RetrievalSplit) -> List[Optional[QueryResult]]:
    dist = pairwise_query_gallery(split)
    results: List[Optional[QueryResult]] = []
    for q in range(split.num_queries):
        try:
            order = rank_gallery(split, q, dist)
        except EvaluationError:
            results.append(None)
            continue
        relevant = split.gallery_ids[order] == split.query_ids[q]
        if not relevant.any():
            results.append(None)
            continue
        results.append(QueryResult(average_precision(relevant), int(np.argmax(relevant))))
    return results


def _valid(results: List[Optional[QueryResult]]) -> List[QueryResult]:
    valid = [r for r in results if r is not None]
    if not valid:
        raise EvaluationError("no query has a relevant gallery item")
    return valid


def mean_average_precision(split: RetrievalSplit) -> float:
    return float(np.mean([r.average_precision for r in _valid(_query_results(split))]))


def cmc(split: RetrievalSplit, ranks: Sequence[int] = (1, 5, 10)) -> List[float]:
    """Fraction of valid queries whose first relevant item is within the top-k, per k."""
    if any(k < 1 for k in ranks):
        raise EvaluationError(f"CMC ranks must be >= 1, got {list(ranks)}")
    first_hits = np.array([r.first_hit for r in _valid(_query_results(split))])
    return [float((first_hits < k).mean()) for k in ranks]


def evaluate(split: RetrievalSplit, ranks: Sequence[int] = (1, 5, 10)) -> RetrievalMetrics:
    results = _query_results(split)
    valid = _valid(results)
    first_hits = np.array([r.first_hit for r in valid])
    metrics = RetrievalMetrics(
        mAP=float(np.mean([r.average_precision for r in valid])),
        cmc={int(k): float((first_hits < k).mean()) for k in ranks},
        num_queries=len(valid),
        num_skipped=len(results) - len(valid),
    )
    cmc_text = ", ".join(f"R{k}={v:.3f}" for k, v in metrics.cmc.items())
    logger.info(
        f"📊 mAP={metrics.mAP:.4f} {cmc_text} ({metrics.num_queries} queries, {metrics.num_skipped} skipped)"
    )
    return metrics


def random_ranking_map(split: RetrievalSplit, trials: int = 20, seed: int = 0) -> float:
    """Expected mAP of a uniformly random gallery order, estimated by simulation."""
    rng = np.random.default_rng(seed)
    scores: List[float] = []
    for q in range(split.num_queries):
        same = (split.gallery_ids == split.query_ids[q]) & (split.gallery_cams == split.query_cams[q])
        valid = np.flatnonzero(~same)
        relevant = split.gallery_ids[valid] == split.query_ids[q]
        if not relevant.any():
            continue
        for _ in range(trials):
            scores.append(average_precision(relevant[rng.permutation(valid.size)]))
    if not scores:
        raise EvaluationError("no query has a relevant gallery item")
    return float(np.mean(scores))
