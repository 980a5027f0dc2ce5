"""
Retrieval and prediction metrics
"""

import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import stats

from ..errors import InvalidInputError, ShapeError, UndefinedMetricError
from ..models import ChannelTrace


@dataclass(frozen=True, eq=False)
class RankingResult:
    """Gallery indices in descending score order plus the relevant indices"""

    ranking: np.ndarray
    relevant: frozenset

    def __post_init__(self):
        ranking = np.asarray(self.ranking, dtype=np.int64)
        if ranking.ndim != 1 or not np.array_equal(np.sort(ranking), np.arange(ranking.size)):
            raise InvalidInputError("ranking must be a permutation of the gallery indices")
        object.__setattr__(self, "ranking", ranking)
        object.__setattr__(self, "relevant", frozenset(int(r) for r in self.relevant))


def average_precision(result: RankingResult) -> float:
    """
    Mean of precision@k over the ranks k of relevant items
    """
    if not result.relevant:
        raise UndefinedMetricError("average precision needs at least one relevant item")
    hits = np.isin(result.ranking, list(result.relevant))
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(np.sum(precision) / len(result.relevant))


def map_score(results: Sequence[RankingResult]) -> float:
    if not results:
        raise UndefinedMetricError("mAP needs at least one query")
    return float(np.mean([average_precision(r) for r in results]))


def rank_at_k(results: Sequence[RankingResult], k: int) -> float:
    """Fraction of queries with a relevant item in the top k (k clamps to the gallery size)"""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if not results:
        raise UndefinedMetricError("Rank@k needs at least one query")
    found = [bool(r.relevant.intersection(r.ranking[:k].tolist())) for r in results]
    return float(np.mean(found))


def nmse(pred: Union[ChannelTrace, np.ndarray], truth: Union[ChannelTrace, np.ndarray]) -> float:
    """sum |pred - truth|^2 / sum |truth|^2"""
    p = pred.h if isinstance(pred, ChannelTrace) else np.asarray(pred)
    t = truth.h if isinstance(truth, ChannelTrace) else np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {t.shape} differ in shape")
    energy = float(np.sum(np.abs(t) ** 2))
    if energy == 0.0:
        raise UndefinedMetricError("NMSE is undefined for an all-zero ground truth")
    return float(np.sum(np.abs(p - t) ** 2) / energy)


nmse_metric = nmse


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation of two equally long series (ties get average ranks)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"series lengths differ: {a.shape} vs {b.shape}")
    if a.size < 3:
        raise InvalidInputError("Spearman rho needs at least three points")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = stats.spearmanr(a, b).statistic
    if np.isnan(rho):
        raise UndefinedMetricError("Spearman rho is undefined for a constant series")
    return float(rho)
