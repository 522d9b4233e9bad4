"""Gradient comparisons, magnitude traces, onset drop and class-correlation heatmaps.

All functions are pure measurements: weights, BN statistics, optimizer state
and caller RNG streams are left untouched.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .rng import fork
from .supernet import SubnetView, forward_subnet
from .training import combine, compute_terms, shrink_sample_set


def cosine(u, v) -> float:
    """Cosine similarity in float64; 0.0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = math.sqrt(float(u @ u)), math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, (u @ v) / (nu * nv))))


def norm(u) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    return math.sqrt(float(u @ u))


@dataclass(frozen=True)
class GradientRecord:
    layer: str
    step: int
    norm_no_shrink: float
    norm_shrink: float
    norm_eps_shrink: float
    cos_no_shrink_shrink: float
    cos_no_shrink_eps_shrink: float
    cos_shrink_eps_shrink: float
    sum_subnet_norms: float

    FIELDS = ("layer", "step", "norm_no_shrink", "norm_shrink", "norm_eps_shrink",
              "cos_no_shrink_shrink", "cos_no_shrink_eps_shrink")


def grad_compare(weights, batch, eps, k, rng, distill="inplace_kd", smoothing=0.1, step=0,
                 configs=None):
    """Per-parameter-tensor comparison of G_noShrink, G_Shrink and G_Shrink(eps).

    The same sampled configs feed both shrinking gradients.  Sampling draws
    from a fork of ``rng``, and BN running statistics are not updated.
    """
    if configs is None:
        configs = shrink_sample_set(weights.space, k, fork(rng), force_full=True)
    terms = compute_terms(weights, batch, configs, distill, smoothing, update_stats=False)
    g_no = terms[0].grads
    g_sh = combine(terms, 1.0)
    g_eps = combine(terms, eps)
    records = []
    for name in weights.order:
        records.append(GradientRecord(
            name, step, norm(g_no[name]), norm(g_sh[name]), norm(g_eps[name]),
            cosine(g_no[name], g_sh[name]), cosine(g_no[name], g_eps[name]),
            cosine(g_sh[name], g_eps[name]),
            sum(norm(t.grads[name]) for t in terms[1:]),
        ))
    return records


def gradients_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GradientRecord.FIELDS)
    for r in records:
        w.writerow([r.layer, r.step] + [repr(getattr(r, f)) for f in GradientRecord.FIELDS[2:]])
    return buf.getvalue()


@dataclass(frozen=True)
class TracePoint:
    step: int
    ratio_eps_shrink: Optional[float]
    ratio_shrink: Optional[float]

    @property
    def defined(self):
        return self.ratio_shrink is not None


def grad_magnitude_trace(reports):
    """||G_Shrink(eps,t)|| / ||G_noShrink(t)|| and ||G_Shrink(t)|| / ||G_noShrink(t)|| per step.

    ``reports`` is any iterable of StepReports (or dicts with the same norm
    fields).  Global norms over all layers; a zero denominator yields an
    undefined point.
    """
    out = []
    for r in reports:
        get = r.get if isinstance(r, dict) else lambda f: getattr(r, f)
        den = get("norm_no_shrink")
        if den == 0.0:
            out.append(TracePoint(get("step"), None, None))
            continue
        out.append(TracePoint(get("step"), get("norm_eps_shrink") / den, get("norm_shrink") / den))
    return out


def layer_averaged_trace(records):
    """Per-layer-averaged variant: mean over layers of the per-layer norm ratios.

    ``records`` are GradientRecords (several steps allowed); layers with a
    zero G_noShrink norm are skipped, a step with none left is undefined.
    """
    by_step = {}
    for r in records:
        by_step.setdefault(r.step, []).append(r)
    out = []
    for step in sorted(by_step):
        rows = [r for r in by_step[step] if r.norm_no_shrink > 0.0]
        if not rows:
            out.append(TracePoint(step, None, None))
            continue
        out.append(TracePoint(step,
                              float(np.mean([r.norm_eps_shrink / r.norm_no_shrink for r in rows])),
                              float(np.mean([r.norm_shrink / r.norm_no_shrink for r in rows]))))
    return out


def trace_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "ratio_eps_shrink", "ratio_shrink"])
    for p in points:
        w.writerow([p.step, "" if p.ratio_eps_shrink is None else repr(p.ratio_eps_shrink),
                    "" if p.ratio_shrink is None else repr(p.ratio_shrink)])
    return buf.getvalue()


def onset_drop(metrics, onset_epoch, key="eval_acc_full") -> float:
    """max over epochs e >= onset of acc[e-1] - acc[e], clipped at 0."""
    acc = metrics.column(key) if hasattr(metrics, "column") else list(metrics)
    if not 1 <= onset_epoch < len(acc):
        raise ContractError(f"onset epoch {onset_epoch} outside log range [1, {len(acc)})")
    return max(0.0, max(acc[e - 1] - acc[e] for e in range(onset_epoch, len(acc))))


@dataclass
class HeatmapRecord:
    matrix: np.ndarray  # C x C, NaN rows/cols for absent classes
    counts: np.ndarray  # predictions per class
    present: np.ndarray  # bool per class

    def mean_off_diagonal(self):
        idx = np.flatnonzero(self.present)
        if len(idx) < 2:
            return 0.0
        sub = np.abs(self.matrix[np.ix_(idx, idx)])
        return float((sub.sum() - np.trace(sub)) / (len(idx) * (len(idx) - 1)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.counts)
        w.writerow(["class"] + [str(j) for j in range(n)] + ["count"])
        for i in range(n):
            w.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in self.matrix[i]]
                       + [int(self.counts[i])])
        return buf.getvalue()


def class_correlation_heatmap(model, split, num_classes=None, batch_size=250) -> HeatmapRecord:
    """A_ij = cosine of the mean logit vectors of samples predicted as i and as j.

    ``model`` is a SubnetView (evaluated in eval mode), a StandaloneModel or any
    callable mapping a Minibatch to a logits array.  argmax ties go to the
    lower class index.
    """
    if len(split) == 0:
        raise ContractError("heatmap split is empty")
    chunks = []
    for batch in split.batches(batch_size):
        with ad.no_grad():
            if isinstance(model, SubnetView):
                logits = forward_subnet(model, batch, "eval").data
            else:
                out = model(batch)
                logits = out.data if isinstance(out, ad.Tensor) else np.asarray(out)
        chunks.append(np.asarray(logits, dtype=np.float64))
    logits = np.concatenate(chunks)
    c = num_classes or logits.shape[1]
    pred = np.argmax(logits, axis=1)
    counts = np.bincount(pred, minlength=c)
    means = np.zeros((c, logits.shape[1]))
    for i in range(c):
        if counts[i]:
            means[i] = logits[pred == i].mean(axis=0)
    present = (counts > 0) & (np.linalg.norm(means, axis=1) > 0)
    if present.sum() <= 1:
        warnings.warn("degenerate heatmap: predictions fall into a single class", RuntimeWarning)
    mat = np.full((c, c), np.nan)
    for i in range(c):
        for j in range(i, c):
            if present[i] and present[j]:
                mat[i, j] = mat[j, i] = 1.0 if i == j else cosine(means[i], means[j])
    return HeatmapRecord(mat, counts, present)
