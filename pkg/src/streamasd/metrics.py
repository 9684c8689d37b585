"""Average precision and its per-group mean."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import MetricError

log = logging.getLogger(__name__)


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks ``k`` holding a positive.

    Ranking is by descending score; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = y[order].astype(bool)
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    # fsum is exactly rounded, so the result does not depend on summation order
    return math.fsum(precision[hits]) / n_pos


@dataclass(frozen=True)
class GroupedAP:
    mean_ap: float
    per_group: dict
    skipped: tuple  # groups without positives

    def __float__(self) -> float:
        return self.mean_ap


def map_over_groups(rows: Iterable[tuple]) -> GroupedAP:
    """Unweighted mean AP over ``(group, score, label)`` rows.

    Groups without a positive label are left out and listed in ``skipped``.
    """
    groups: "OrderedDict[object, tuple[list, list]]" = OrderedDict()
    for g, score, label in rows:
        s, y = groups.setdefault(g, ([], []))
        s.append(score)
        y.append(label)
    per_group, skipped = {}, []
    for g, (s, y) in groups.items():
        if not any(y):
            skipped.append(g)
            continue
        per_group[g] = average_precision(s, y)
    if skipped:
        log.warning("skipped %d group(s) with no positive labels", len(skipped))
    if not per_group:
        raise MetricError("no group has a positive label")
    return GroupedAP(float(np.mean(list(per_group.values()))), per_group, tuple(skipped))
