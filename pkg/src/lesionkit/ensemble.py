"""Greedy ensemble selection with replacement, blending, and multi-view averaging."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyGroup, MalformedHeader, SingleClassLabels, UnknownModelId
from .metrics import auc_score
from .volgrid import write_bytes_if_changed


@dataclass(frozen=True, eq=False)
class PredictionTable:
    """Validation probabilities, one row per model and one column per lesion."""

    model_ids: tuple[str, ...]
    matrix: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int64)
        if matrix.shape != (len(self.model_ids), labels.size):
            raise ValueError(f"matrix shape {matrix.shape} does not match models x lesions")
        if not np.all((matrix >= 0) & (matrix <= 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "labels", labels)


@dataclass
class EnsembleWeights:
    model_ids: tuple[str, ...]
    counts: tuple[int, ...]
    auc_trace: list[float] = field(default_factory=list)

    @property
    def weights(self) -> dict[str, float]:
        total = sum(self.counts)
        return {m: c / total for m, c in zip(self.model_ids, self.counts)}

    def to_json(self) -> str:
        w = self.weights
        return json.dumps({"model_ids": list(self.model_ids), "counts": list(self.counts),
                           "weights": [w[m] for m in self.model_ids], "auc_trace": self.auc_trace},
                          indent=2) + "\n"

    def save(self, path) -> None:
        write_bytes_if_changed(path, self.to_json().encode())

    @classmethod
    def load(cls, path) -> "EnsembleWeights":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["model_ids"]), tuple(int(c) for c in d["counts"]), list(d["auc_trace"]))


def greedy_select(table: PredictionTable, max_iters: int = 100, patience: int = 5,
                  tol: float = 1e-6) -> EnsembleWeights:
    """Forward selection with replacement maximizing ensemble AUC.

    Each iteration scores every model as one more copy in the count-weighted mean
    and takes the best (lowest index on ties). A pick that would lower the AUC is
    never taken. Selection stops after ``patience`` consecutive iterations whose
    best improvement is below ``tol``, or after ``max_iters`` iterations.
    """
    labels = table.labels
    if labels.min() == labels.max():
        raise SingleClassLabels("validation labels hold a single class")
    if not table.model_ids:
        raise ValueError("no models to select from")
    counts = np.zeros(len(table.model_ids), dtype=np.int64)
    running = np.zeros(labels.size)
    current = -np.inf
    trace: list[float] = []
    stalls = 0
    for _ in range(max_iters):
        n = counts.sum()
        aucs = [auc_score((running + row) / (n + 1), labels) for row in table.matrix]
        best = int(np.argmax(aucs))
        gain = aucs[best] - current
        if gain < 0:
            break
        counts[best] += 1
        running = running + table.matrix[best]
        current = aucs[best]
        trace.append(current)
        stalls = stalls + 1 if gain < tol else 0
        if stalls >= patience:
            break
    return EnsembleWeights(table.model_ids, tuple(int(c) for c in counts), trace)


def ensemble_predict(weights: EnsembleWeights, predictions: Mapping[str, np.ndarray]) -> np.ndarray:
    """Convex blend of per-model probabilities."""
    w = weights.weights
    unknown = [m for m, c in zip(weights.model_ids, weights.counts) if c and m not in predictions]
    if unknown:
        raise UnknownModelId(f"no predictions for models {unknown}")
    blend = None
    for m in weights.model_ids:
        if w[m] == 0:
            continue
        term = w[m] * np.asarray(predictions[m], dtype=np.float64)
        blend = term if blend is None else blend + term
    return np.clip(blend, 0.0, 1.0)


def multiview_average(probs: Sequence[float], keys: Sequence[Hashable],
                      view_index: Optional[Sequence[int]] = None,
                      expected: Optional[Sequence[Hashable]] = None) -> tuple[list, np.ndarray]:
    """Mean probability per lesion key over all of its views.

    Summation runs in view-index order so the result does not depend on input
    order. Returns the sorted keys and their means.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if view_index is None:
        view_index = np.arange(len(probs))
    groups: dict = {}
    for p, k, v in zip(probs, keys, view_index):
        groups.setdefault(k, []).append((int(v), float(p)))
    if expected is not None:
        empty = [k for k in expected if k not in groups]
        if empty:
            raise EmptyGroup(f"no view predictions for {empty}")
    out_keys = sorted(groups)
    means = []
    for k in out_keys:
        vals = [p for _, p in sorted(groups[k])]
        means.append(sum(vals) / len(vals))
    return out_keys, np.asarray(means)


# --- prediction exchange CSV -------------------------------------------------------------

PREDICTION_HEADER = ["model_id", "case_id", "finding_id", "view_index", "probability"]


def write_predictions(rows: Sequence[tuple], path) -> None:
    """Rows of (model_id, case_id, finding_id, view_index, probability)."""
    lines = [",".join(PREDICTION_HEADER)]
    for m, c, f, v, p in rows:
        lines.append(f"{m},{c},{int(f)},{int(v)},{float(p)!r}")
    write_bytes_if_changed(path, ("\n".join(lines) + "\n").encode())


def read_predictions(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_HEADER:
            raise MalformedHeader(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        return [(r["model_id"], r["case_id"], int(r["finding_id"]), int(r["view_index"]), float(r["probability"]))
                for r in reader]


def lesion_table(rows: Sequence[tuple], labels: Mapping[tuple[str, int], int]) -> PredictionTable:
    """Multi-view average every model's rows and align them on the labelled lesions."""
    by_model: dict[str, list] = {}
    for r in rows:
        by_model.setdefault(r[0], []).append(r)
    keys = sorted(labels)
    model_ids = sorted(by_model)
    matrix = []
    for m in model_ids:
        rs = by_model[m]
        got_keys, means = multiview_average([r[4] for r in rs], [(r[1], r[2]) for r in rs],
                                            [r[3] for r in rs], expected=keys)
        lookup = dict(zip(got_keys, means))
        matrix.append([lookup[k] for k in keys])
    return PredictionTable(tuple(model_ids), np.asarray(matrix), np.asarray([labels[k] for k in keys]))
