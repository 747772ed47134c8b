"""ROC curves, AUC, sensitivity/specificity and Youden operating points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import SingleClassLabels
from .volgrid import write_bytes_if_changed


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Vertices of the ROC step curve from (0, 0) to (1, 1).

    ``thresholds[i]`` is the score cut reproducing vertex i under the rule
    "predict positive iff score >= threshold"; the first vertex uses +inf.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __len__(self):
        return len(self.fpr)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise SingleClassLabels("both classes must be present")
    return scores, labels


def _roc_counts(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(1 - y)[ends]]
    thresholds = np.r_[np.inf, s[ends]]
    return tp, fp, thresholds


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC curve with ties collapsed, and its trapezoidal area.

    The area is accumulated in integer counts, so it equals the Mann-Whitney
    statistic with ties counted as one half.
    """
    scores, labels = _check(scores, labels)
    tp, fp, thresholds = _roc_counts(scores, labels)
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(fp / n_neg, tp / n_pos, thresholds), auc


def auc_score(scores, labels) -> float:
    return roc_auc(scores, labels)[1]


def sens_spec(scores, labels, threshold: float) -> tuple[float, float]:
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    return tp / (tp + fn), tn / (tn + fp)


def youden_optimal(curve: RocCurve) -> float:
    """Threshold maximizing tpr - fpr; ties go to the lower false-positive rate."""
    j = curve.tpr - curve.fpr
    best = j.max()
    candidates = np.flatnonzero(j == best)
    pick = candidates[np.argmin(curve.fpr[candidates])]
    return float(curve.thresholds[pick])


# --- export ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{'inf' if math.isinf(t) else repr(float(t))},{float(f)!r},{float(p)!r}")
    return "\n".join(lines) + "\n"


def write_roc_csv(curve: RocCurve, path) -> None:
    write_bytes_if_changed(path, roc_csv(curve).encode())


def roc_svg(curves: Mapping[str, tuple[RocCurve, float]], size: int = 400) -> str:
    """Byte-stable SVG of one or more ROC curves, legend entries carry the AUC."""
    m = 50
    plot = size - 2 * m

    def xy(f, t):
        return f"{m + f * plot:.2f},{m + (1 - t) * plot:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{m}" y1="{m + plot}" x2="{m + plot}" y2="{m + plot}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{m + plot}" stroke="black"/>',
        f'<line x1="{m}" y1="{m + plot}" x2="{m + plot}" y2="{m}" stroke="#999999" stroke-dasharray="4,4"/>',
    ]
    for k in range(6):
        v = k / 5
        out.append(f'<text x="{m + v * plot:.2f}" y="{m + plot + 16}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        out.append(f'<text x="{m - 6}" y="{m + (1 - v) * plot + 3:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{m + plot / 2:.2f}" y="{size - 10}" font-size="12" text-anchor="middle">False positive rate</text>')
    out.append(f'<text x="14" y="{m + plot / 2:.2f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {m + plot / 2:.2f})">True positive rate</text>')
    for i, (name, (curve, auc)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{m + plot - 4:.2f}" y="{m + plot - 8 - 14 * i:.2f}" font-size="11" '
                   f'text-anchor="end" fill="{color}">{_escape(name)} (AUC = {auc:.4f})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_roc_svg(curves: Mapping[str, tuple[RocCurve, float]], path) -> None:
    write_bytes_if_changed(path, roc_svg(curves).encode())


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def summarize(scores: Sequence[float], labels: Sequence[int]) -> dict:
    curve, auc = roc_auc(scores, labels)
    thr = youden_optimal(curve)
    sens, spec = sens_spec(scores, labels, thr)
    return {"auc": auc, "threshold": None if math.isinf(thr) else thr, "sensitivity": sens, "specificity": spec,
            "n": len(labels), "n_positive": int(np.sum(labels))}
