"""Multi-label evaluation: mAP, OF1/CF1, prediction correlations, kNN retrieval."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLD = 0.5
AP_CONVENTION = "non-interpolated"


def average_precision(scores, labels) -> float:
    """Mean of precision@r over the ranks r that hold a positive.

    Ranking is by descending score with ties broken by ascending index.
    Returns ``nan`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.array([average_precision(scores[:, k], labels[:, k]) for k in range(scores.shape[1])])


def mean_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    ap = per_class_ap(scores, labels)
    valid = ~np.isnan(ap)
    return float(ap[valid].mean()) if valid.any() else float("nan")


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_scores(probs, labels, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float, int]:
    """Return ``(OF1, CF1, n_empty)``.

    OF1 pools every (instance, class) decision; CF1 averages per-class F1.
    A class with neither true nor predicted positives scores 0 and is counted
    in ``n_empty``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = np.asarray(probs) >= threshold
    lab = np.asarray(labels).astype(bool)
    tp = (pred & lab).sum(axis=0)
    fp = (pred & ~lab).sum(axis=0)
    fn = (~pred & lab).sum(axis=0)
    of1 = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    per_class = [_f1(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]
    n_empty = int(((tp + fp + fn) == 0).sum())
    return of1, float(np.mean(per_class)), n_empty


def correlation_matrix(probs) -> np.ndarray:
    """Pearson correlation between class columns.

    Constant columns get 0 off the diagonal and 1 on it.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("correlation needs at least 2 rows")
    c = p - p.mean(axis=0)
    norm = np.sqrt((c * c).sum(axis=0))
    ok = p.max(axis=0) > p.min(axis=0)
    safe = np.where(ok, norm, 1.0)
    z = c / safe
    corr = z.T @ z
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def correlation_diff(m_a, m_b) -> float:
    a = np.asarray(m_a, dtype=np.float64)
    b = np.asarray(m_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"correlation matrices differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()))


@dataclass
class Neighbor:
    rank: int
    index: int
    distance: float
    labels: list[int]
    shared: list[int]


def knn_retrieve(db, db_labels, query, k: int, query_labels=None) -> list[Neighbor]:
    """The ``k`` nearest database rows to ``query`` by Euclidean distance.

    Ascending distance, ties by ascending index.  ``shared`` lists the label
    indices a neighbour has in common with ``query_labels`` (empty when
    ``query_labels`` is not given).
    """
    db = np.asarray(db, dtype=np.float64)
    if db.ndim == 1:
        db = db[:, None]
    n = db.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    diff = db - q
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = np.lexsort((np.arange(n), dist))[:k]
    lab = np.asarray(db_labels)
    qset = set(np.flatnonzero(query_labels).tolist()) if query_labels is not None else set()
    out = []
    for r, i in enumerate(order, start=1):
        li = np.flatnonzero(lab[i]).tolist()
        out.append(Neighbor(r, int(i), float(dist[i]), li, sorted(qset.intersection(li))))
    return out


def pool_embeddings(embs: np.ndarray, mode: str = "mean") -> np.ndarray:
    """[n, q, d] label-wise embeddings -> [n, d] retrieval vectors."""
    if mode == "mean":
        return embs.mean(axis=1)
    if mode == "max":
        return embs.max(axis=1)
    raise ValueError(f"unknown pooling {mode!r}")


@dataclass
class MetricsReport:
    mAP: float
    per_class_ap: list[float]
    OF1: float
    CF1: float
    threshold: float = DEFAULT_THRESHOLD
    ap_convention: str = AP_CONVENTION
    n_empty_classes: int = 0
    class_names: list[str] = field(default_factory=list)
    correlation: list[list[float]] | None = None
    correlation_diff: float | None = None
    retrieval: list[dict] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = [None if np.isnan(v) else v for v in self.per_class_ap]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_ap_csv(self, path) -> None:
        """One row per class with its AP, then an mAP footer."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "AP"])
            names = self.class_names or [str(k) for k in range(len(self.per_class_ap))]
            for name, ap in zip(names, self.per_class_ap):
                w.writerow([name, "" if np.isnan(ap) else f"{100 * ap:.2f}"])
            w.writerow(["mAP", f"{100 * self.mAP:.2f}"])


def compute_report(probs, labels, threshold: float = DEFAULT_THRESHOLD,
                   class_names=None, with_correlation: bool = False) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    ap = per_class_ap(probs, labels)
    valid = ~np.isnan(ap)
    of1, cf1, n_empty = f1_scores(probs, labels, threshold)
    rep = MetricsReport(
        mAP=float(ap[valid].mean()) if valid.any() else float("nan"),
        per_class_ap=[float(v) for v in ap],
        OF1=of1,
        CF1=cf1,
        threshold=threshold,
        n_empty_classes=n_empty,
        class_names=list(class_names) if class_names is not None else [],
    )
    if with_correlation:
        rep.correlation = correlation_matrix(probs).tolist()
    return rep
