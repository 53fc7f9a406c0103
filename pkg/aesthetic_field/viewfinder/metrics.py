import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .exceptions import DomainError, UndefinedCorrelationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    """Paired predicted/reference scores for one scene"""

    predicted: np.ndarray
    reference: np.ndarray
    scene_id: str = ''

    def __post_init__(self):
        predicted = np.array(self.predicted, dtype=np.float64).reshape(-1)
        reference = np.array(self.reference, dtype=np.float64).reshape(-1)
        if predicted.shape != reference.shape:
            raise DomainError(f"scene {self.scene_id}: series lengths differ ({predicted.size} vs {reference.size})")
        if not (np.all(np.isfinite(predicted)) and np.all(np.isfinite(reference))):
            raise DomainError(f"scene {self.scene_id}: non-finite score")
        object.__setattr__(self, 'predicted', predicted)
        object.__setattr__(self, 'reference', reference)

    def __len__(self):
        return self.predicted.size


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DomainError(f"Series lengths differ ({x.size} vs {y.size})")
    if x.size < 2:
        raise UndefinedCorrelationError(f"correlation needs at least 2 samples, got {x.size}")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float(stats.pearsonr(x, y)[0])
    return min(max(r, -1.0), 1.0)


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient"""
    return _pearson(*_pair(x, y))


def srcc(x, y) -> float:
    """Spearman rank-order correlation; ties receive their average rank"""
    x, y = _pair(x, y)
    return _pearson(stats.rankdata(x, method='average'), stats.rankdata(y, method='average'))


METRICS: Dict[str, Callable] = {'plcc': plcc, 'srcc': srcc}


def per_scene_average(series: Sequence[ScoreSeries], metric: Callable) -> float:
    """Unweighted mean of the metric over scenes"""
    if not series:
        raise DomainError("Need at least one scene to average")
    values = []
    for item in series:
        try:
            values.append(metric(item.predicted, item.reference))
        except UndefinedCorrelationError as e:
            raise UndefinedCorrelationError(str(e), scene_id=item.scene_id) from e
    return float(np.mean(values))


def delta_score(traces: Sequence[Sequence[float]]) -> float:
    """Mean of (best - initial) over refinement traces"""
    if not traces:
        return 0.0
    deltas = []
    for trace in traces:
        if len(trace) < 1:
            raise DomainError("Refinement trace must hold at least the initial score")
        deltas.append(max(trace) - trace[0])
    return float(np.mean(deltas))


def correlation_table(series: Sequence[ScoreSeries]) -> List[dict]:
    """Per-scene PLCC/SRCC rows followed by an average row"""
    rows = []
    for item in series:
        row = {'scene': item.scene_id, 'views': len(item)}
        for name, metric in METRICS.items():
            try:
                row[name] = metric(item.predicted, item.reference)
            except UndefinedCorrelationError as e:
                logger.error(f"Correlation undefined for scene {item.scene_id}: {e}")
                raise UndefinedCorrelationError(str(e), scene_id=item.scene_id) from e
        rows.append(row)
    average: Dict[str, Optional[object]] = {'scene': 'average', 'views': sum(len(s) for s in series)}
    for name in METRICS:
        average[name] = float(np.mean([row[name] for row in rows])) if rows else math.nan
    rows.append(average)
    return rows
