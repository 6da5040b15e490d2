"""AUROC / AUPRC, bootstrap confidence intervals and a paired permutation test.

Aggregates over labels are macro averages: the unweighted mean over labels
that have both classes present.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .errors import MisalignedInputs, NoPositives, SingleClass, TooFewValidResamples


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via midranks (Mann-Whitney U)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MisalignedInputs(f"scores {s.shape} and labels {y.shape} must be aligned 1-D arrays")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _auroc_rows(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise AUROC for (R, N) score/label matrices; NaN for single-class rows."""
    n_pos = y.sum(axis=1)
    n_neg = y.shape[1] - n_pos
    ranks = rankdata(s, axis=1)
    u = (ranks * y).sum(axis=1) - n_pos * (n_pos + 1) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = u / (n_pos * n_neg)
    out[(n_pos == 0) | (n_neg == 0)] = np.nan
    return out


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) P_k."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MisalignedInputs(f"scores {s.shape} and labels {y.shape} must be aligned 1-D arrays")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    prev_tp = np.r_[0, tp[:-1]]
    terms = [(int(d) / n_pos) * (int(t) / (int(t) + int(f))) for d, t, f in zip(tp - prev_tp, tp, fp) if d]
    return math.fsum(terms)


def _per_label(metric, scores: np.ndarray, labels: np.ndarray, exclude=()) -> list[float | None]:
    out = []
    for j in range(labels.shape[1]):
        if j in exclude:
            out.append(None)
            continue
        try:
            out.append(metric(scores[:, j], labels[:, j]))
        except (SingleClass, NoPositives):
            out.append(None)
    return out


def macro(values) -> float:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        raise SingleClass("no label has both classes present")
    return float(np.mean(vals))


def macro_auroc(scores, labels, exclude=()) -> float:
    s, y = np.asarray(scores, float), np.asarray(labels)
    if s.ndim == 1:
        return auroc(s, y)
    return macro(_per_label(auroc, s, y, exclude))


def macro_auprc(scores, labels, exclude=()) -> float:
    s, y = np.asarray(scores, float), np.asarray(labels)
    if s.ndim == 1:
        return auprc(s, y)
    # AUPRC is defined with one positive, but keep the label set aligned with AUROC
    valid = [j for j in range(y.shape[1]) if j not in exclude and 0 < y[:, j].sum() < y.shape[0]]
    if not valid:
        raise SingleClass("no label has both classes present")
    return float(np.mean([auprc(s[:, j], y[:, j]) for j in valid]))


METRICS: dict[str, Callable] = {"auroc": macro_auroc, "auprc": macro_auprc}


@dataclass(frozen=True)
class BootstrapCI:
    lo: float
    hi: float
    n_valid: int
    n_skipped: int

    def __iter__(self):
        return iter((self.lo, self.hi))


def bootstrap_ci(scores, labels, metric: str | Callable = "auroc", n_boot: int = 1000, seed: int = 0,
                 level: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap interval over resampled (score, label) rows.

    Resamples on which the metric is undefined (a single class) are skipped
    and counted; fewer than half valid raises ``TooFewValidResamples``.
    """
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MisalignedInputs(f"scores {s.shape} and labels {y.shape} differ")
    n = s.shape[0]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    if metric == "auroc" and s.ndim == 1:
        values = _auroc_rows(s[idx], _as_binary(y)[idx])
        values = values[~np.isnan(values)]
    else:
        fn = METRICS[metric] if isinstance(metric, str) else metric
        vals = []
        for row in idx:
            try:
                vals.append(fn(s[row], y[row]))
            except (SingleClass, NoPositives):
                continue
        values = np.asarray(vals, dtype=np.float64)
    n_valid = int(values.size)
    if n_valid < n_boot / 2:
        raise TooFewValidResamples(f"only {n_valid} of {n_boot} resamples were valid")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(float(lo), float(hi), n_valid, n_boot - n_valid)


def significance_test(scores_a, scores_b, labels, n_perm: int = 1000, seed: int = 0,
                      metric: str = "auroc") -> float:
    """Two-sided paired permutation test on the metric difference A - B.

    Each permutation swaps the two models' scores on a random half of the
    samples; p is the fraction of permutations with |delta| >= |observed|.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels)
    if a.shape != b.shape or a.shape != y.shape:
        raise MisalignedInputs(f"shapes {a.shape}, {b.shape}, {y.shape} do not align")
    fn = METRICS[metric]
    observed = fn(a, y) - fn(b, y)
    rng = np.random.default_rng(seed)
    swap = rng.random((n_perm, a.shape[0])) < 0.5
    tol = 1e-12
    if metric == "auroc" and a.ndim == 1:
        yb = _as_binary(y)
        pa = np.where(swap, b, a)
        pb = np.where(swap, a, b)
        deltas = _auroc_rows(pa, np.broadcast_to(yb, pa.shape)) - _auroc_rows(pb, np.broadcast_to(yb, pb.shape))
    else:
        deltas = np.empty(n_perm)
        for k in range(n_perm):
            m = swap[k][:, None] if a.ndim == 2 else swap[k]
            deltas[k] = fn(np.where(m, b, a), y) - fn(np.where(m, a, b), y)
    return float(np.mean(np.abs(deltas) >= abs(observed) - tol))


@dataclass
class MetricReport:
    per_label_auroc: list
    per_label_auprc: list
    auroc: float
    auprc: float
    auroc_ci: tuple[float, float]
    auprc_ci: tuple[float, float]
    n_bootstrap: int
    p_value_vs_reference: float | None = None
    excluded_labels: list = field(default_factory=list)
    n_samples: int = 0
    # kept so another report can be compared against this one later
    sample_ids: list | None = None
    scores: list | None = None
    labels: list | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_ci"] = list(self.auroc_ci)
        d["auprc_ci"] = list(self.auprc_ci)
        return d

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["auroc_ci"] = tuple(d["auroc_ci"])
        d["auprc_ci"] = tuple(d["auprc_ci"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def metric_report(scores, labels, n_boot: int = 1000, seed: int = 0, exclude=(),
                  sample_ids=None, keep_scores: bool = True) -> MetricReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    exclude = tuple(sorted(set(exclude)))
    per_auroc = _per_label(auroc, s, y, exclude)
    per_auprc = [None if a is None else auprc(s[:, j], y[:, j]) for j, a in enumerate(per_auroc)]
    excluded = [j for j, a in enumerate(per_auroc) if a is None]

    def agg_auroc(ss, yy):
        return macro_auroc(ss, yy, excluded)

    def agg_auprc(ss, yy):
        return macro_auprc(ss, yy, excluded)

    return MetricReport(
        per_label_auroc=per_auroc,
        per_label_auprc=per_auprc,
        auroc=macro(per_auroc),
        auprc=macro(per_auprc),
        auroc_ci=tuple(bootstrap_ci(s, y, agg_auroc, n_boot, seed)),
        auprc_ci=tuple(bootstrap_ci(s, y, agg_auprc, n_boot, seed)),
        n_bootstrap=n_boot,
        excluded_labels=excluded,
        n_samples=int(s.shape[0]),
        sample_ids=None if sample_ids is None else list(sample_ids),
        scores=s.tolist() if keep_scores else None,
        labels=y.tolist() if keep_scores else None,
    )


def compare_reports(report: MetricReport, reference: MetricReport, n_perm: int = 1000, seed: int = 0) -> float:
    """p-value of the macro-AUROC difference between two reports on the same samples."""
    if report.scores is None or reference.scores is None:
        raise MisalignedInputs("both reports must carry per-sample scores")
    if report.sample_ids is not None and reference.sample_ids is not None:
        if list(report.sample_ids) != list(reference.sample_ids):
            raise MisalignedInputs("reports cover different samples")
    a = np.asarray(report.scores)
    b = np.asarray(reference.scores)
    y = np.asarray(report.labels)
    keep = [j for j in range(y.shape[1]) if j not in report.excluded_labels and j not in reference.excluded_labels]
    return significance_test(a[:, keep], b[:, keep], y[:, keep], n_perm=n_perm, seed=seed)


def permutation_null(scores, labels, n_perm: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mean and std of AUROC when the labels are shuffled against the scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MisalignedInputs("permutation null takes aligned 1-D arrays")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(y) for _ in range(n_perm)])
    vals = _auroc_rows(np.broadcast_to(s, perms.shape), perms)
    return float(np.nanmean(vals)), float(np.nanstd(vals))
