"""Discrimination metrics and the bootstrap machinery around them.

AUROC is the tie-aware pairwise concordance probability computed via
midranks; AUPRC is average precision with equal scores grouped into one
cut.  Confidence intervals are percentile bootstrap over records, with
all nine outcomes resampled jointly (one index vector per resample).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InstabilityError, UndefinedMetricError
from .rng import stream
from .stats import _midranks

logger = logging.getLogger(__name__)


def auroc(scores, labels):
    """Pairwise concordance probability: ties credited 0.5, O(n log n)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = _midranks(scores)
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision with equal scores grouped into a single cut."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    total = 0.0
    tp = fp = 0
    prev_tp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        group_pos = int(y[i:j + 1].sum())
        tp += group_pos
        fp += (j - i + 1) - group_pos
        if tp > prev_tp:
            total += (tp / (tp + fp)) * ((tp - prev_tp) / n_pos)
        prev_tp = tp
        i = j + 1
    return float(total)


@dataclass
class ScoredSet:
    """Per-record model scores, labels, subgroup attributes and site id."""

    scores: np.ndarray  # (n, 9) in (0, 1)
    labels: np.ndarray  # (n, 9) in {0, 1}
    outcomes: tuple
    sex: np.ndarray = None
    race: np.ndarray = None
    age: np.ndarray = None
    site: str = ""

    def __post_init__(self):
        if self.scores.shape != self.labels.shape:
            raise UndefinedMetricError("scores and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise UndefinedMetricError("scores must be finite")

    def __len__(self):
        return self.scores.shape[0]

    def take(self, idx):
        return ScoredSet(
            scores=self.scores[idx], labels=self.labels[idx],
            outcomes=self.outcomes,
            sex=None if self.sex is None else self.sex[idx],
            race=None if self.race is None else self.race[idx],
            age=None if self.age is None else self.age[idx],
            site=self.site,
        )


@dataclass
class MetricReport:
    """Point estimates and bootstrap CIs per outcome, Table-2 style."""

    outcomes: tuple
    auroc_point: dict
    auroc_ci: dict  # outcome -> (lo, hi)
    auprc_point: dict
    auprc_ci: dict
    bootstrap_b: int
    alpha: float
    n_records: int
    skipped_resamples: int = 0

    def to_json(self):
        per_outcome = {}
        for name in self.outcomes:
            per_outcome[name] = {
                "auroc": self.auroc_point.get(name),
                "auroc_ci": list(self.auroc_ci[name]) if name in self.auroc_ci else None,
                "auprc": self.auprc_point.get(name),
                "auprc_ci": list(self.auprc_ci[name]) if name in self.auprc_ci else None,
            }
        return {"outcomes": per_outcome, "bootstrap_b": self.bootstrap_b,
                "alpha": self.alpha, "n_records": self.n_records,
                "skipped_resamples": self.skipped_resamples}

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["outcome", "metric", "point", "lo", "hi"])
            for name in self.outcomes:
                for metric, points, cis in (("auroc", self.auroc_point, self.auroc_ci),
                                            ("auprc", self.auprc_point, self.auprc_ci)):
                    point = points.get(name)
                    lo, hi = cis.get(name, (None, None))
                    writer.writerow([
                        name, metric,
                        "" if point is None else repr(point),
                        "" if lo is None else repr(lo),
                        "" if hi is None else repr(hi),
                    ])


def _percentile_interval(samples, alpha):
    lo, hi = np.percentile(np.asarray(samples, dtype=np.float64),
                           [100 * alpha / 2, 100 * (1 - alpha / 2)],
                           method="linear")
    return float(lo), float(hi)


MAX_REDRAWS = 16


def _resample_indices(n, seed, b, is_degenerate, max_attempts=MAX_REDRAWS):
    """Index vector for resample b; degenerate draws are redrawn on keyed
    sub-streams.  Returns (indices, attempts_used) or (None, attempts)."""
    for attempt in range(max_attempts):
        idx = stream(seed, "bootstrap", b, attempt).integers(0, n, size=n)
        if not is_degenerate(idx):
            return idx, attempt + 1
    return None, max_attempts


def bootstrap_ci(metric, scores, labels, b=1000, alpha=0.05, seed=0):
    """Percentile bootstrap CI of one metric on one outcome.

    Resamples records with replacement; single-class resamples are skipped
    and redrawn (count logged).  More than 50% degenerate draws raises.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if b < 100:
        raise InstabilityError("bootstrap needs B >= 100")
    n = len(scores)

    def degenerate(idx):
        picked = labels[idx]
        return picked.min() == picked.max()

    samples = np.empty(b)
    skipped = 0
    for i in range(b):
        idx, attempts = _resample_indices(n, seed, i, degenerate)
        skipped += attempts - 1
        if idx is None:
            skipped += 1
            raise InstabilityError("resample could not find both classes")
        samples[i] = metric(scores[idx], labels[idx])
    if skipped > 0.5 * (b + skipped):
        raise InstabilityError(
            f"{skipped} degenerate resamples against {b} accepted")
    if skipped:
        logger.info("bootstrap redrew %d degenerate resamples", skipped)
    return _percentile_interval(samples, alpha)


def bootstrap_report(scored: ScoredSet, b=1000, alpha=0.05, seed=0) -> MetricReport:
    """Joint record-level bootstrap over all outcomes at once.

    One index vector per resample is shared by every outcome; a resample
    is degenerate if any evaluable outcome loses a class, and is then
    redrawn.  Outcomes lacking both classes in the full set are reported
    as None and excluded from the degeneracy rule.
    """
    n = len(scored)
    outcomes = scored.outcomes
    evaluable = []
    for k, _name in enumerate(outcomes):
        col = scored.labels[:, k]
        if col.min() != col.max():
            evaluable.append(k)
        else:
            logger.warning("outcome %s has a single class; skipping", outcomes[k])

    def degenerate(idx):
        picked = scored.labels[idx]
        return any(picked[:, k].min() == picked[:, k].max() for k in evaluable)

    auroc_samples = {k: np.empty(b) for k in evaluable}
    auprc_samples = {k: np.empty(b) for k in evaluable}
    skipped = 0
    for i in range(b):
        idx, attempts = _resample_indices(n, seed, i, degenerate)
        skipped += attempts - 1
        if idx is None:
            raise InstabilityError("joint resample could not keep both classes")
        picked_scores = scored.scores[idx]
        picked_labels = scored.labels[idx]
        for k in evaluable:
            auroc_samples[k][i] = auroc(picked_scores[:, k], picked_labels[:, k])
            auprc_samples[k][i] = auprc(picked_scores[:, k], picked_labels[:, k])
    if skipped > 0.5 * (b + skipped):
        raise InstabilityError(f"{skipped} degenerate resamples against {b} accepted")

    auroc_point, auroc_ci, auprc_point, auprc_ci = {}, {}, {}, {}
    for k, name in enumerate(outcomes):
        if k not in evaluable:
            continue
        auroc_point[name] = auroc(scored.scores[:, k], scored.labels[:, k])
        auprc_point[name] = auprc(scored.scores[:, k], scored.labels[:, k])
        auroc_ci[name] = _percentile_interval(auroc_samples[k], alpha)
        auprc_ci[name] = _percentile_interval(auprc_samples[k], alpha)
    return MetricReport(outcomes=outcomes, auroc_point=auroc_point,
                        auroc_ci=auroc_ci, auprc_point=auprc_point,
                        auprc_ci=auprc_ci, bootstrap_b=b, alpha=alpha,
                        n_records=n, skipped_resamples=skipped)


def compare_models(scores_a, scores_b, labels, metric=auroc, b=1000,
                   alpha=0.05, seed=0):
    """Paired bootstrap p-value for a metric difference on a shared set.

    Two-sided p = 2 * min(P(delta <= 0), P(delta >= 0)) with the 1/(B+1)
    continuity correction, capped at 1.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if scores_a.shape != scores_b.shape or scores_a.shape != labels.shape:
        raise UndefinedMetricError("paired comparison needs identical record sets")
    n = len(labels)

    def degenerate(idx):
        picked = labels[idx]
        return picked.min() == picked.max()

    deltas = np.empty(b)
    skipped = 0
    for i in range(b):
        idx, attempts = _resample_indices(n, seed, i, degenerate)
        skipped += attempts - 1
        if idx is None:
            raise InstabilityError("resample could not find both classes")
        deltas[i] = metric(scores_a[idx], labels[idx]) - metric(scores_b[idx], labels[idx])
    if skipped > 0.5 * (b + skipped):
        raise InstabilityError(f"{skipped} degenerate resamples against {b} accepted")
    p_le = (int((deltas <= 0).sum()) + 1) / (b + 1)
    p_ge = (int((deltas >= 0).sum()) + 1) / (b + 1)
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


def compare_independent(scores_a, labels_a, scores_b, labels_b, metric=auroc,
                        b=1000, seed=0):
    """Unpaired bootstrap p-value for a metric difference between two
    independent strata (each stratum resampled on its own indices)."""
    n_a, n_b = len(labels_a), len(labels_b)

    deltas = np.empty(b)
    skipped = 0
    for i in range(b):
        idx_a, att_a = _resample_indices(
            n_a, (seed, "a"), i,
            lambda idx: labels_a[idx].min() == labels_a[idx].max())
        idx_b, att_b = _resample_indices(
            n_b, (seed, "b"), i,
            lambda idx: labels_b[idx].min() == labels_b[idx].max())
        skipped += att_a + att_b - 2
        if idx_a is None or idx_b is None:
            raise InstabilityError("stratum resample could not keep both classes")
        deltas[i] = metric(scores_a[idx_a], labels_a[idx_a]) - \
            metric(scores_b[idx_b], labels_b[idx_b])
    p_le = (int((deltas <= 0).sum()) + 1) / (b + 1)
    p_ge = (int((deltas >= 0).sum()) + 1) / (b + 1)
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


SUBGROUP_PARTITIONS = ("sex", "race", "age")


def subgroup_masks(scored: ScoredSet, partition):
    """Two-stratum masks for sex (F/M), race (AA/non-AA) or age (<=65/>65)."""
    if partition == "sex":
        return {"female": scored.sex == "F", "male": scored.sex == "M"}
    if partition == "race":
        return {"african_american": scored.race == "AA",
                "non_african_american": scored.race == "non-AA"}
    if partition == "age":
        # the boundary age of exactly 65 belongs to the lower stratum
        return {"age_le_65": scored.age <= 65.0, "age_gt_65": scored.age > 65.0}
    raise UndefinedMetricError(f"unknown partition {partition!r}")


def subgroup_eval(scored: ScoredSet, partition, b=1000, alpha=0.05, seed=0):
    """Per-stratum metric reports plus cross-stratum unpaired p-values."""
    masks = subgroup_masks(scored, partition)
    reports = {}
    for stratum, mask in masks.items():
        subset = scored.take(np.flatnonzero(mask))
        if len(subset) == 0:
            logger.warning("stratum %s/%s is empty; skipped", partition, stratum)
            continue
        reports[stratum] = bootstrap_report(subset, b=b, alpha=alpha,
                                            seed=(seed, partition, stratum))

    p_values = {}
    names = sorted(masks)
    if len(names) == 2 and all(n in reports for n in names):
        first = scored.take(np.flatnonzero(masks[names[0]]))
        second = scored.take(np.flatnonzero(masks[names[1]]))
        for k, outcome in enumerate(scored.outcomes):
            cols = (first.labels[:, k], second.labels[:, k])
            if any(c.min() == c.max() for c in cols):
                logger.warning("outcome %s degenerate in a %s stratum; skipped",
                               outcome, partition)
                continue
            p_values[outcome] = compare_independent(
                first.scores[:, k], first.labels[:, k],
                second.scores[:, k], second.labels[:, k],
                b=b, seed=(seed, partition, outcome))
    return reports, p_values


def summarize_repeats(per_repeat):
    """Mean and population SD per key over repeat dictionaries."""
    keys = per_repeat[0].keys()
    out = {}
    for key in keys:
        values = np.array([r[key] for r in per_repeat], dtype=np.float64)
        out[key] = (float(values.mean()), float(values.std()))
    return out


def format_mean_sd(mean, sd):
    """eTable-8 style cell: '0.89 (0.003)'."""
    return f"{mean:.2f} ({sd:.3f})"
