"""BN calibration, subnet accuracy, FLOP buckets and mean pareto accuracy."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .supernet import (ArchConfig, ArchSpace, SupernetWeights, count_macs, forward_subnet,
                       sample_uniform, select_subnet)

CALIBRATION_BATCH_SIZE = 64


@dataclass(frozen=True)
class EvalRecord:
    config_digest: str
    macs: int
    top1: float
    split: str = "test"
    calibrated: bool = False
    config: Optional[ArchConfig] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ContractError(f"accuracy {self.top1} outside [0, 1]")
        if self.macs <= 0:
            raise ContractError(f"MACs must be positive, got {self.macs}")


def bn_calibrate(weights: SupernetWeights, config: ArchConfig, calibration_split, num_batches: int,
                 batch_size=CALIBRATION_BATCH_SIZE, store=True):
    """Re-estimate BN running statistics of ``config`` from training data.

    Batches are taken in split order.  Each BN layer gets the mean of the
    per-batch means and the mean of the per-batch unbiased variances.  Only the
    statistics bucket changes; conv/gamma/beta stay untouched.  With
    ``store=False`` the bucket is returned without being written to ``weights``.
    """
    if len(calibration_split) == 0:
        raise ContractError("calibration split is empty")
    if num_batches < 1:
        raise ContractError(f"num_batches must be >= 1, got {num_batches}")
    view = select_subnet(weights, config)
    capture = {}
    for i, batch in enumerate(calibration_split.batches(batch_size)):
        if i >= num_batches:
            break
        with ad.no_grad():
            forward_subnet(view, batch, "train", update_stats=False, capture=capture,
                           bn_stats={})
    dtype = weights.dtype
    stats = {}
    for layer, batches in capture.items():
        mean = np.mean([b.mean for b in batches], axis=0)
        var = np.mean([b.var_unbiased for b in batches], axis=0)
        stats[layer] = (mean.astype(dtype), var.astype(dtype))
    if store:
        weights.bn_stats[config.digest] = stats
        weights.calibrated.add(config.digest)
    return stats


def evaluate_subnet(weights: SupernetWeights, config: ArchConfig, test_split, batch_size=250,
                    bn_stats=None, split_name="test", forward: Optional[Callable] = None) -> EvalRecord:
    """Top-1 accuracy in eval mode.

    ``forward`` (batch -> logits array) replaces the supernet forward, e.g. to
    inject a test double.
    """
    if len(test_split) == 0:
        raise ContractError("test split is empty")
    view = select_subnet(weights, config)
    calibrated = bn_stats is not None or config.digest in weights.calibrated
    correct = 0
    for batch in test_split.batches(batch_size):
        if forward is not None:
            logits = np.asarray(forward(batch))
        else:
            with ad.no_grad():
                logits = forward_subnet(view, batch, "eval", bn_stats=bn_stats).data
        correct += int((np.argmax(logits, axis=1) == batch.labels).sum())
    return EvalRecord(config.digest, count_macs(weights.space, config), correct / len(test_split),
                      split_name, calibrated, config)


@dataclass
class ParetoFrontier:
    boundaries: np.ndarray
    buckets: list  # one Optional[EvalRecord] per bucket
    records: list = field(default_factory=list)
    mean_pareto_accuracy: Optional[float] = None

    @property
    def points(self):
        return [r for r in self.buckets if r is not None]

    @property
    def empty_buckets(self):
        return [i for i, r in enumerate(self.buckets) if r is None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_lo", "bucket_hi", "config_digest", "macs", "top1", "calibrated"])
        for i, rec in enumerate(self.buckets):
            lo, hi = repr(float(self.boundaries[i])), repr(float(self.boundaries[i + 1]))
            if rec is None:
                w.writerow([lo, hi, "EMPTY", "", "", ""])
            else:
                w.writerow([lo, hi, rec.config_digest, rec.macs, repr(rec.top1),
                            int(rec.calibrated)])
        mpa = "" if self.mean_pareto_accuracy is None else repr(self.mean_pareto_accuracy)
        w.writerow(["mean_pareto_accuracy", mpa])
        return buf.getvalue()


def bucket_boundaries(lo_macs, hi_macs, num_buckets):
    if num_buckets < 2:
        raise ContractError(f"num_buckets must be >= 2, got {num_buckets}")
    if hi_macs <= lo_macs:
        raise ContractError("MACs range is empty")
    return np.linspace(float(lo_macs), float(hi_macs), num_buckets + 1)


def bucket_index(boundaries, macs):
    i = int(np.searchsorted(boundaries, macs, side="right")) - 1
    return min(max(i, 0), len(boundaries) - 2)


def frontier_from_records(records, boundaries) -> ParetoFrontier:
    """Most accurate record per bucket (ties: fewer MACs, then digest)."""
    nb = len(boundaries) - 1
    best = [None] * nb
    for rec in records:
        i = bucket_index(boundaries, rec.macs)
        cur = best[i]
        if cur is None or (-rec.top1, rec.macs, rec.config_digest) < (-cur.top1, cur.macs, cur.config_digest):
            best[i] = rec
    frontier = ParetoFrontier(np.asarray(boundaries), best, list(records))
    if len(frontier.points) >= 2:
        frontier.mean_pareto_accuracy = mean_pareto_accuracy(frontier)
    return frontier


def pareto_frontier(weights: SupernetWeights, space: ArchSpace, test_split, num_buckets=6,
                    num_samples=128, rng=None, calibration_split=None, calibration_batches=4,
                    configs=None) -> ParetoFrontier:
    """Sample, calibrate and evaluate configs; keep the best one per FLOP bucket.

    a_min and a_full are always evaluated.  ``configs`` replaces sampling
    (e.g. an exhaustive enumeration).  Calibration uses private BN buckets, so
    ``weights`` is not modified.
    """
    if calibration_split is None:
        raise ContractError("pareto_frontier needs a calibration split drawn from training data")
    if configs is None:
        if num_samples < num_buckets:
            raise ContractError(f"num_samples ({num_samples}) must be >= num_buckets ({num_buckets})")
        configs = sample_uniform(space, num_samples, rng)
    full, small = space.full(), space.minimal()
    seen, unique = set(), []
    for cfg in [small, full] + list(configs):
        if cfg.digest not in seen:
            seen.add(cfg.digest)
            unique.append(cfg)
    boundaries = bucket_boundaries(count_macs(space, small), count_macs(space, full), num_buckets)
    records = []
    for cfg in unique:
        stats = bn_calibrate(weights, cfg, calibration_split, calibration_batches, store=False)
        records.append(evaluate_subnet(weights, cfg, test_split, bn_stats=stats))
    return frontier_from_records(records, boundaries)


def auc(points) -> float:
    """Trapezoidal area of accuracy over MACs rescaled to [0, 1]."""
    pts = sorted((float(m), float(a)) for m, a in points)
    if len(pts) < 2:
        raise ContractError(f"need at least 2 frontier points, got {len(pts)}")
    lo, hi = pts[0][0], pts[-1][0]
    if hi <= lo:
        raise ContractError("frontier points span no MACs range")
    area = 0.0
    for (m0, a0), (m1, a1) in zip(pts, pts[1:]):
        area += (m1 - m0) / (hi - lo) * (a0 + a1) / 2.0
    return area


def mean_pareto_accuracy(frontier) -> float:
    """AUC of the selected bucket points (empty buckets excluded)."""
    points = frontier.points if isinstance(frontier, ParetoFrontier) else frontier
    return auc([(r.macs, r.top1) if isinstance(r, EvalRecord) else r for r in points])
