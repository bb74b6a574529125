"""Classification, calibration and fairness metrics over probability predictions.

All functions take a :class:`PredictionSet` (an ``S x C`` probability matrix,
integer labels and optional per-sample subgroup tags).

Conventions:

* the predicted class is ``argmax`` over the row, ties going to the lowest index;
* ECE bins are equal-width on ``[0, 1]`` and right-closed, ``(lo, hi]``, with
  the first bin also holding confidence 0;
* one-vs-rest AUC counts strictly greater positive/negative pairs, so ties earn
  nothing unless ``ties="half"`` is requested.
"""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MetricInputError

__all__ = [
    "PredictionSet",
    "CalibrationConfig",
    "MetricReport",
    "SubgroupReport",
    "accuracy",
    "balanced_accuracy",
    "macro_f1",
    "auc_ovr",
    "ece",
    "cece",
    "brier",
    "reliability_diagram",
    "evaluate",
    "subgroup_report",
    "head_tail_groups",
    "read_predictions",
    "write_predictions",
    "read_groups",
    "write_reliability_diagram",
]


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    groups: tuple = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels)
        if probs.ndim != 2:
            raise MetricInputError(f"probs must be S x C, got shape {probs.shape}")
        if labels.shape != (probs.shape[0],):
            raise MetricInputError(f"{labels.shape[0] if labels.ndim else 0} labels for {probs.shape[0]} samples")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise MetricInputError("labels must be integers")
        labels = labels.astype(np.int64)
        if probs.size:
            if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
                raise MetricInputError("probabilities must lie in [0, 1]")
            bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > 1e-6)
            if bad.size:
                raise MetricInputError(f"row {bad[0]} sums to {probs[bad[0]].sum():.8f}, not 1")
        if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise MetricInputError(f"labels must lie in [0, {probs.shape[1]})")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        if self.groups is not None:
            groups = tuple(self.groups)
            if len(groups) != probs.shape[0]:
                raise MetricInputError(f"{len(groups)} group tags for {probs.shape[0]} samples")
            object.__setattr__(self, "groups", groups)

    @property
    def n_samples(self):
        return self.probs.shape[0]

    @property
    def n_classes(self):
        return self.probs.shape[1]

    def predicted(self):
        return np.argmax(self.probs, axis=1)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        groups = None if self.groups is None else tuple(g for g, m in zip(self.groups, mask) if m)
        return PredictionSet(self.probs[mask], self.labels[mask], groups)


@dataclass(frozen=True)
class CalibrationConfig:
    bins: int = 15

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError(f"bin count must be >= 1, got {self.bins}")

    def edges(self):
        return np.linspace(0.0, 1.0, self.bins + 1)


@dataclass
class MetricReport:
    """Metric values as fractions.  ``auc`` is None when no class has both positives and negatives."""

    acc: float
    bacc: float
    mf1: float
    auc: float
    ece: float
    cece: float
    brier: float
    n_samples: int = 0

    def as_percent(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "n_samples":
                continue
            out[k] = None if v is None else 100.0 * v
        return out


@dataclass
class SubgroupReport:
    reports: dict = field(default_factory=dict)
    empty: list = field(default_factory=list)
    excluded: int = 0


def _require_samples(ps):
    if ps.n_samples == 0:
        raise MetricInputError("prediction set is empty")


def accuracy(ps):
    _require_samples(ps)
    return float(np.mean(ps.predicted() == ps.labels))


def balanced_accuracy(ps):
    """Mean per-class recall over the classes present in the labels."""
    _require_samples(ps)
    pred = ps.predicted()
    recalls = [np.mean(pred[ps.labels == c] == c) for c in np.unique(ps.labels)]
    return float(np.mean(recalls))


def macro_f1(ps):
    """Unweighted mean F1 over classes seen in the labels or predictions; undefined F1 counts as 0."""
    _require_samples(ps)
    pred = ps.predicted()
    scores = []
    for c in np.union1d(np.unique(ps.labels), np.unique(pred)):
        tp = np.sum((pred == c) & (ps.labels == c))
        fp = np.sum((pred == c) & (ps.labels != c))
        fn = np.sum((pred != c) & (ps.labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def auc_ovr(ps, ties="strict"):
    """Mean one-vs-rest AUC by exhaustive positive/negative pair counting.

    Classes without at least one positive and one negative are skipped.
    """
    if ties not in ("strict", "half"):
        raise ValueError(f"ties must be 'strict' or 'half', got {ties!r}")
    _require_samples(ps)
    aucs = []
    for c in range(ps.n_classes):
        pos = ps.probs[ps.labels == c, c]
        neg = ps.probs[ps.labels != c, c]
        if pos.size == 0 or neg.size == 0:
            continue
        diff = pos[:, None] - neg[None, :]
        wins = np.count_nonzero(diff > 0)
        if ties == "half":
            wins = wins + 0.5 * np.count_nonzero(diff == 0)
        aucs.append(wins / (pos.size * neg.size))
    if not aucs:
        raise MetricInputError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def _bin_index(conf, n_bins):
    inner = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    return np.searchsorted(inner, conf, side="left")


def reliability_diagram(confidence, correct, cfg=CalibrationConfig()):
    """Per-bin rows ``(bin_lo, bin_hi, count, accuracy, confidence)``.

    Empty bins report NaN accuracy and confidence.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = cfg.edges()
    idx = _bin_index(confidence, cfg.bins)
    rows = []
    for b in range(cfg.bins):
        m = idx == b
        n = int(m.sum())
        if n:
            rows.append((edges[b], edges[b + 1], n, float(correct[m].mean()), float(confidence[m].mean())))
        else:
            rows.append((edges[b], edges[b + 1], 0, float("nan"), float("nan")))
    return rows


def _ece_from(confidence, correct, cfg):
    total = len(confidence)
    if total == 0:
        return 0.0
    err = 0.0
    for _, _, n, acc, conf in reliability_diagram(confidence, correct, cfg):
        if n:
            err += n / total * abs(acc - conf)
    return err


def ece(ps, cfg=CalibrationConfig()):
    """Occupancy-weighted |accuracy - confidence| over top-class confidence bins."""
    return _ece_from(ps.probs.max(axis=1), ps.predicted() == ps.labels, cfg)


def cece(ps, cfg=CalibrationConfig()):
    """Mean over classes of the ECE of ``p(., c)`` against ``label == c``."""
    per_class = [_ece_from(ps.probs[:, c], ps.labels == c, cfg) for c in range(ps.n_classes)]
    return float(np.mean(per_class))


def brier(ps):
    """Mean over samples of the squared distance to the one-hot label."""
    _require_samples(ps)
    onehot = np.eye(ps.n_classes)[ps.labels]
    return float(np.mean(np.sum((ps.probs - onehot) ** 2, axis=1)))


def evaluate(ps, cfg=CalibrationConfig(), ties="strict"):
    _require_samples(ps)
    try:
        auc = auc_ovr(ps, ties=ties)
    except MetricInputError:
        auc = None
    return MetricReport(
        acc=accuracy(ps),
        bacc=balanced_accuracy(ps),
        mf1=macro_f1(ps),
        auc=auc,
        ece=ece(ps, cfg),
        cece=cece(ps, cfg),
        brier=brier(ps),
        n_samples=ps.n_samples,
    )


def subgroup_report(ps, grouping=None, cfg=CalibrationConfig(), expected=None):
    """Evaluate the metric suite on each subgroup slice.

    ``grouping`` holds one tag per sample (defaults to ``ps.groups``); samples
    tagged ``None`` or ``""`` are excluded.  Names in ``expected`` that receive
    no samples are listed in ``SubgroupReport.empty`` and get no metrics.
    """
    if grouping is None:
        grouping = ps.groups
    if grouping is None:
        raise MetricInputError("no subgroup tags supplied")
    grouping = list(grouping)
    if len(grouping) != ps.n_samples:
        raise MetricInputError(f"{len(grouping)} group tags for {ps.n_samples} samples")
    tags = np.array(["" if g is None else str(g) for g in grouping], dtype=object)
    names = list(dict.fromkeys(t for t in tags if t != ""))
    for e in expected or ():
        if e not in names:
            names.append(e)
    report = SubgroupReport(excluded=int(np.sum(tags == "")))
    for name in names:
        mask = tags == name
        if not mask.any():
            report.empty.append(name)
            continue
        report.reports[name] = evaluate(ps.subset(mask), cfg)
    return report


def head_tail_groups(labels, class_counts, threshold=20):
    """Tag each sample ``"tail"`` if its class has fewer than ``threshold`` training images, else ``"head"``."""
    class_counts = np.asarray(class_counts)
    tail = class_counts < threshold
    return ["tail" if tail[y] else "head" for y in np.asarray(labels)]


def read_predictions(path):
    """Load ``p0,...,p{C-1},label[,group]`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MetricInputError(f"{path}: empty file") from None
        has_group = header[-1] == "group"
        cols = header[:-1] if has_group else header
        if len(cols) < 2 or cols[-1] != "label":
            raise MetricInputError(f"{path}: header must be p0,...,p{{C-1}},label[,group]")
        n_classes = len(cols) - 1
        if cols[:-1] != [f"p{c}" for c in range(n_classes)]:
            raise MetricInputError(f"{path}: probability columns must be named p0..p{n_classes - 1}")
        probs, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise MetricInputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                probs.append([float(v) for v in row[:n_classes]])
                labels.append(int(row[n_classes]))
            except ValueError as exc:
                raise MetricInputError(f"{path}:{lineno}: {exc}") from None
            if has_group:
                groups.append(row[n_classes + 1].strip() or None)
    return PredictionSet(
        np.array(probs, dtype=np.float64).reshape(-1, n_classes),
        np.array(labels, dtype=np.int64),
        tuple(groups) if has_group else None,
    )


def write_predictions(path, ps):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = [f"p{c}" for c in range(ps.n_classes)] + ["label"]
        if ps.groups is not None:
            header.append("group")
        writer.writerow(header)
        for s in range(ps.n_samples):
            row = [repr(float(p)) for p in ps.probs[s]] + [int(ps.labels[s])]
            if ps.groups is not None:
                row.append("" if ps.groups[s] is None else ps.groups[s])
            writer.writerow(row)


def read_groups(path):
    """One subgroup tag per line under a ``group`` header; blank lines mark excluded samples."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "group":
        raise MetricInputError(f"{path}: first line must be the header 'group'")
    return [ln.strip() or None for ln in lines[1:]]


def write_reliability_diagram(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
        for lo, hi, n, acc, conf in rows:
            writer.writerow([repr(float(lo)), repr(float(hi)), n, "" if n == 0 else repr(acc), "" if n == 0 else repr(conf)])
