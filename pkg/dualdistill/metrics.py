'''Threshold-free detection and localization metrics.

    `auroc` is the exact Mann-Whitney statistic with midranks for ties.
    `pro` averages the per-region overlap of thresholded maps over every
    ground-truth connected component (8-connectivity) and integrates it
    against the false-positive rate on normal pixels up to `fpr_limit`.
'''
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from skimage.measure import label as label_regions
from sklearn.metrics import auc

from dualdistill.common import (TEXTURE_CATEGORIES, InvalidArgumentError,
                                UndefinedMetricError)

logger = logging.getLogger(__name__)

DEFAULT_FPR_LIMIT = 0.3
DEFAULT_MAX_THRESHOLDS = 10000
METRIC_COLUMNS = ['i_auc', 'p_auc', 'pro']


def _as_array(values) -> np.ndarray:
    if hasattr(values, 'detach'):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    '''Area under the ROC curve of `scores` against binary `labels`'''
    scores = _as_array(scores).ravel()
    labels = _as_array(labels).ravel() > 0.5
    if scores.shape != labels.shape:
        raise InvalidArgumentError('{} scores for {} labels'.format(scores.size, labels.size))
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError('AUROC needs both classes, got {} positive and {} negative'
                                   .format(n_pos, n_neg))
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pool(maps: Sequence, masks: Sequence):
    if len(maps) != len(masks):
        raise InvalidArgumentError('{} maps for {} masks'.format(len(maps), len(masks)))
    maps = [_as_array(m) for m in maps]
    masks = [_as_array(m) > 0.5 for m in masks]
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise InvalidArgumentError('Map {} and mask {} differ in shape'.format(
                m.shape, g.shape))
    return maps, masks


def pixel_auroc(maps: Sequence, masks: Sequence) -> float:
    '''AUROC over every pixel of every map pooled together'''
    maps, masks = _pool(maps, masks)
    if not maps:
        raise UndefinedMetricError('No maps to evaluate')
    return auroc(np.concatenate([m.ravel() for m in maps]),
                 np.concatenate([g.ravel() for g in masks]))


def pro_thresholds(values: np.ndarray, max_thresholds: int = DEFAULT_MAX_THRESHOLDS) -> np.ndarray:
    '''Every distinct value, or `max_thresholds` quantiles when there are more'''
    distinct = np.unique(values)
    if distinct.size <= max_thresholds:
        return distinct
    return np.unique(np.quantile(values, np.linspace(0, 1, max_thresholds)))


def pro_curve(maps: Sequence, masks: Sequence,
              max_thresholds: int = DEFAULT_MAX_THRESHOLDS):
    '''(fpr, pro) at every threshold t, predicting `map > t`, in increasing fpr'''
    maps, masks = _pool(maps, masks)
    normal_values = np.concatenate([m[~g] for m, g in zip(maps, masks)]) if maps else np.empty(0)
    regions = []
    for m, g in zip(maps, masks):
        labelled = label_regions(g, connectivity=2)
        for region_id in range(1, labelled.max() + 1):
            regions.append(np.sort(m[labelled == region_id]))
    if not regions:
        raise UndefinedMetricError('PRO needs at least one anomalous region')
    if normal_values.size == 0:
        raise UndefinedMetricError('PRO needs normal pixels to measure false positives')

    thresholds = pro_thresholds(np.concatenate([m.ravel() for m in maps]), max_thresholds)
    normal_values = np.sort(normal_values)
    fpr = 1 - np.searchsorted(normal_values, thresholds, side='right') / normal_values.size
    overlap = np.zeros_like(thresholds)
    for values in regions:
        overlap += 1 - np.searchsorted(values, thresholds, side='right') / values.size
    overlap /= len(regions)
    return fpr[::-1], overlap[::-1]


def pro(maps: Sequence, masks: Sequence, fpr_limit: float = DEFAULT_FPR_LIMIT,
        n_thresholds: int = DEFAULT_MAX_THRESHOLDS) -> float:
    '''Normalized area under the PRO curve for fpr in [0, fpr_limit].

        Beyond its last point the curve is held flat up to the limit; a
        segment crossing the limit is interpolated.
    '''
    if not 0 < fpr_limit <= 1:
        raise InvalidArgumentError('fpr_limit must lie in (0, 1], got {}'.format(fpr_limit))
    fpr, overlap = pro_curve(maps, masks, n_thresholds)
    beyond = np.flatnonzero(fpr > fpr_limit)
    if beyond.size:
        i = beyond[0]
        f0, f1, p0, p1 = fpr[i - 1], fpr[i], overlap[i - 1], overlap[i]
        end = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0)
        fpr, overlap = fpr[:i], overlap[:i]
    else:
        end = overlap[-1]
    fpr = np.append(fpr, fpr_limit)
    overlap = np.append(overlap, end)
    return float(auc(fpr, overlap) / fpr_limit)


@dataclass
class MetricsReport:
    category: str
    i_auc: float
    p_auc: float
    pro: float
    n_images: int
    fpr_limit: float = DEFAULT_FPR_LIMIT
    config_fingerprint: Optional[str] = None

    def __post_init__(self):
        for name in METRIC_COLUMNS:
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InvalidArgumentError('{} = {} outside [0, 1]'.format(name, value))
        if not 0 < self.fpr_limit <= 1:
            raise InvalidArgumentError('fpr_limit {} outside (0, 1]'.format(self.fpr_limit))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def compute_report(category: str, scores: Sequence[float], labels: Sequence[int],
                   maps: Sequence, masks: Sequence, fpr_limit: float = DEFAULT_FPR_LIMIT,
                   n_thresholds: int = DEFAULT_MAX_THRESHOLDS,
                   config_fingerprint: Optional[str] = None) -> MetricsReport:
    return MetricsReport(
        category=category,
        i_auc=auroc(scores, labels),
        p_auc=pixel_auroc(maps, masks),
        pro=pro(maps, masks, fpr_limit, n_thresholds),
        n_images=len(scores),
        fpr_limit=fpr_limit,
        config_fingerprint=config_fingerprint)


def summarize_reports(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    '''One row per category plus mean rows.

        When both texture and object categories are present, their separate
        means are added before the overall mean.
    '''
    if not reports:
        return pd.DataFrame(columns=METRIC_COLUMNS + ['n_images'])
    df = pd.DataFrame([r.to_dict() for r in reports]).set_index('category')
    df = df[METRIC_COLUMNS + ['n_images']]
    means: List[pd.Series] = []
    is_texture = df.index.isin(TEXTURE_CATEGORIES)
    if is_texture.any() and (~is_texture).any():
        means.append(df.loc[is_texture, METRIC_COLUMNS].mean().rename('texture mean'))
        means.append(df.loc[~is_texture, METRIC_COLUMNS].mean().rename('object mean'))
    if len(df) > 1:
        means.append(df[METRIC_COLUMNS].mean().rename('mean'))
    if means:
        df = pd.concat([df, pd.DataFrame(means)])
    return df


def format_summary(df: pd.DataFrame) -> str:
    '''Human-readable table with metrics as percentages'''
    formatters = {name: '{:.2f}'.format for name in METRIC_COLUMNS}
    shown = df.copy()
    shown[METRIC_COLUMNS] = shown[METRIC_COLUMNS] * 100
    if 'n_images' in shown:
        shown['n_images'] = shown['n_images'].map(
            lambda v: '' if pd.isnull(v) else '{:d}'.format(int(v)))
    return shown.to_string(formatters=formatters)
