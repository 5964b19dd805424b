"""Production threshold detector on iTLB-normalized interval averages.

A worker is flagged once the retired-branch metric of a 1-second interval
average reaches the configured threshold (default 4096 branches per iTLB
access).  A second rule covers store-to-load-forwarding abuse, which hides
below the branch threshold but drives the memory-disambiguation history-reset
counter far above ordinary workloads.

Rules are OR-ed, branch rule first, so the triggering metric is
deterministic.  Flagging costs isolation, not termination, which is why a
sub-percent false-positive rate is acceptable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trace import IntervalAverage
from . import channel as _channel
from .profiles import (
    BENIGN_MD_MEAN,
    METRIC_INTERCEPT,
    STL_ATTACK_MD_MEAN,
    AttackProfile,
    DilutionModel,
)

BRANCH_THRESHOLD_DEFAULT = 4096.0
# No threshold is published for the STL rule, only the separated means;
# the geometric mean of the two is the default decision point.
STL_THRESHOLD_DEFAULT = math.sqrt(STL_ATTACK_MD_MEAN * BENIGN_MD_MEAN)
SUBREQUEST_LIMIT_DEFAULT = 10_000

BRANCH_METRIC_NAME = "branch_per_itlb"
STL_METRIC_NAME = "md_reset_per_itlb"


class EmptyPopulation(Exception):
    """A threshold sweep needs at least one benign average."""


class UnreachableTarget(Exception):
    """No amplification level gets the attack below the target metric."""


@dataclass(frozen=True)
class ThresholdConfig:
    branch_per_itlb_threshold: float = BRANCH_THRESHOLD_DEFAULT
    stl_reset_threshold: float = STL_THRESHOLD_DEFAULT
    subrequest_limit: int = SUBREQUEST_LIMIT_DEFAULT

    def __post_init__(self):
        # 0 is allowed: it degrades the fleet to strict process isolation.
        if self.branch_per_itlb_threshold < 0 or self.stl_reset_threshold < 0:
            raise ValueError("thresholds must be >= 0")
        if self.subrequest_limit < 1:
            raise ValueError("subrequest_limit must be >= 1")


@dataclass(frozen=True)
class ThresholdVerdict:
    suspect: bool
    triggering_metric: str
    value: float
    threshold: float


def classify_threshold(avg: IntervalAverage, cfg: ThresholdConfig) -> ThresholdVerdict:
    """Flag an interval average; branch rule checked before the STL rule."""
    branch_value = avg.mean_metrics.branch_instructions
    if branch_value >= cfg.branch_per_itlb_threshold:
        return ThresholdVerdict(
            suspect=True,
            triggering_metric=BRANCH_METRIC_NAME,
            value=branch_value,
            threshold=cfg.branch_per_itlb_threshold,
        )
    stl_value = avg.mean_metrics.mem_disambiguation_resets
    if stl_value >= cfg.stl_reset_threshold:
        return ThresholdVerdict(
            suspect=True,
            triggering_metric=STL_METRIC_NAME,
            value=stl_value,
            threshold=cfg.stl_reset_threshold,
        )
    return ThresholdVerdict(
        suspect=False,
        triggering_metric=BRANCH_METRIC_NAME,
        value=branch_value,
        threshold=cfg.branch_per_itlb_threshold,
    )


def sweep_thresholds(
    benign_averages: Sequence[IntervalAverage],
    thresholds: Sequence[float],
) -> list[tuple[float, float]]:
    """False-positive rate of the branch rule at each candidate threshold.

    fp_rate(t) is the survival function of the benign branch metric, so the
    output is nonincreasing in t.
    """
    if len(benign_averages) == 0:
        raise EmptyPopulation("benign population is empty")
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending")
    metrics = np.sort(
        np.asarray([avg.mean_metrics.branch_instructions for avg in benign_averages])
    )
    n = metrics.size
    at_or_above = n - np.searchsorted(metrics, thresholds, side="left")
    return [(float(t), float(k) / n) for t, k in zip(thresholds, at_or_above)]


@dataclass(frozen=True)
class EvasionCost:
    """Cost of staying under a detection threshold, per leaked bit.

    ``code_pages`` is the page-inflation route (None when per-page branch
    cost alone already exceeds the target); the remaining fields describe
    the amplification-reduction route.
    """

    target_metric: float
    code_pages: int | None
    code_bytes: int | None
    amplification: int
    requests_per_bit: int
    leakage_bits_per_hour: float


def evasion_cost(
    target_metric: float,
    attack_profile: AttackProfile,
    dilution: DilutionModel | None = None,
    runtime_model: "_channel.RuntimeModel | None" = None,
    requests_at_unit_amplification: int = _channel.UNIT_AMPLIFICATION_REQUESTS,
) -> EvasionCost:
    """Both evasion routes for one attack profile and target ratio.

    Page inflation dilutes the full-strength attack below the target;
    amplification reduction runs at the largest factor whose metric stays
    below the target and pays for it in requests, hence leakage rate.
    Raises UnreachableTarget when even amplification 1 exceeds the target.
    """
    if target_metric <= 0:
        raise ValueError("target_metric must be positive")
    dilution = dilution or DilutionModel()
    runtime_model = runtime_model or _channel.RuntimeModel.fit_reference()

    # metric(a) < target  <=>  a < (target - intercept)/slope
    slope = attack_profile.metric_slope
    bound = (target_metric - METRIC_INTERCEPT) / slope
    amplification = math.ceil(bound) - 1 if bound == int(bound) else math.floor(bound)
    if amplification < 1:
        raise UnreachableTarget(
            f"metric at amplification 1 "
            f"({attack_profile.branch_metric(1):.2f}) is not below {target_metric}"
        )

    full_metric = attack_profile.branch_metric()
    pages = dilution.pages_to_reach(full_metric, target_metric)

    requests = max(1, round(requests_at_unit_amplification / amplification))
    estimate = _channel.leakage_rate(amplification, requests, runtime_model=runtime_model)
    return EvasionCost(
        target_metric=target_metric,
        code_pages=pages,
        code_bytes=None if pages is None else dilution.code_bytes(pages),
        amplification=amplification,
        requests_per_bit=requests,
        leakage_bits_per_hour=estimate.bits_per_hour,
    )
