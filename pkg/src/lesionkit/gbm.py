"""Gradient-boosted regression trees on the logistic loss.

Trees are grown by exact greedy search over every distinct threshold, using the
second-order gain and the closed-form leaf weight -G/(H+lambda).
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateLabels, FeatureCountMismatch, MalformedHeader, TooFewSamples
from .metrics import auc_score
from .volgrid import write_bytes_if_changed

PRIOR_CLIP = 1e-6


@dataclass(frozen=True)
class BoostConfig:
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    l2_lambda: float = 1.0
    min_child_hessian: float = 1e-3
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0:
            raise ValueError("n_trees must be >= 1 and max_depth >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.l2_lambda < 0 or self.min_child_hessian < 0:
            raise ValueError("l2_lambda and min_child_hessian must be non-negative")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


GRID = {"max_depth": (2, 3, 4), "learning_rate": (0.05, 0.1, 0.3), "l2_lambda": (1.0, 5.0)}


def grid_configs(base: BoostConfig = BoostConfig(), grid=GRID) -> list[BoostConfig]:
    """Every combination of the grid values, other fields taken from ``base``."""
    keys = list(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        d = asdict(base)
        d.update(zip(keys, combo))
        out.append(BoostConfig(**d))
    return out


@dataclass
class TreeNode:
    """A split (feature, threshold, children) or a leaf (weight). ``x < threshold`` goes left."""

    weight: Optional[float] = None
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    default_branch: str = "left"
    gain: float = 0.0
    grad_sum: float = 0.0
    hess_sum: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.weight is not None

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def leaves(self) -> list["TreeNode"]:
        return [self] if self.is_leaf else self.left.leaves() + self.right.leaves()

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"weight": self.weight}
        return {"feature": self.feature, "threshold": self.threshold, "default_branch": self.default_branch,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "weight" in d:
            return cls(weight=float(d["weight"]))
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   default_branch=d.get("default_branch", "left"),
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        self._fill(x, np.arange(x.shape[0]), out)
        return out

    def _fill(self, x, rows, out):
        if self.is_leaf:
            out[rows] = self.weight
            return
        col = x[rows, self.feature]
        go_left = col < self.threshold
        if self.default_branch == "left":
            go_left |= np.isnan(col)
        self.left._fill(x, rows[go_left], out)
        self.right._fill(x, rows[~go_left], out)


@dataclass
class BoostedModel:
    base_score: float
    trees: list
    config: BoostConfig
    features: list  # names (or column indices as strings) the columns correspond to
    train_loss: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def margin(self, x: np.ndarray) -> np.ndarray:
        m = np.full(x.shape[0], self.base_score)
        for t in self.trees:
            m += self.config.learning_rate * t.apply(x)
        return m

    def to_dict(self) -> dict:
        return {"base_score": self.base_score, "config": asdict(self.config), "features": list(self.features),
                "trees": [t.to_dict() for t in self.trees], "train_loss": list(self.train_loss)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        return cls(float(d["base_score"]), [TreeNode.from_dict(t) for t in d["trees"]],
                   BoostConfig(**d["config"]), list(d["features"]), list(d.get("train_loss", [])))


def sigmoid(m):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(m, dtype=np.float64)))


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood, computed stably from the margin."""
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def split_gain(gl, hl, gr, hr, lam):
    g, h = gl + gr, hl + hr
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - g * g / (h + lam))


def leaf_weight(g, h, lam):
    return -g / (h + lam)


def best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float, min_child_hessian: float = 0.0,
               order: Optional[np.ndarray] = None):
    """Best (gain, feature, threshold) over all distinct-value boundaries, or None.

    ``order`` may hold a per-column ascending argsort of ``x`` (shape (n, F)).
    Ties go to the lower feature index, then to the lower threshold.
    """
    n, nf = x.shape
    if n < 2 or nf == 0:
        return None
    if order is None:
        order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    gt, ht = g.sum(), h.sum()
    gr, hr = gt - gl, ht - hl
    valid = (xs[1:] > xs[:-1]) & (hl >= min_child_hessian) & (hr >= min_child_hessian)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = split_gain(gl, hl, gr, hr, lam)
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
    flat = int(np.argmax(gain.T))  # row-major over (feature, position)
    f, k = divmod(flat, n - 1)
    if not np.isfinite(gain[k, f]):
        return None
    lo, hi = float(xs[k, f]), float(xs[k + 1, f])
    thr = 0.5 * (lo + hi)
    if not lo < thr <= hi:
        thr = hi
    return float(gain[k, f]), int(f), thr


def grow_tree(x: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int, lam: float,
              min_child_hessian: float = 0.0) -> TreeNode:
    """Greedy depth-limited tree for fixed gradients/hessians; splits need positive gain."""
    order = np.argsort(x, axis=0, kind="stable")

    def build(rows: np.ndarray, depth: int) -> TreeNode:
        gs, hs = float(g[rows].sum()), float(h[rows].sum())
        node = TreeNode(weight=leaf_weight(gs, hs, lam), grad_sum=gs, hess_sum=hs)
        if depth >= max_depth or rows.size < 2:
            return node
        member = np.zeros(x.shape[0], dtype=bool)
        member[rows] = True
        sub = order.T[member[order.T]].reshape(x.shape[1], rows.size).T
        # positions inside ``rows``: map global row ids to local ones
        local = np.empty(x.shape[0], dtype=np.int64)
        local[rows] = np.arange(rows.size)
        found = best_split(x[rows], g[rows], h[rows], lam, min_child_hessian, order=local[sub])
        if found is None or found[0] <= 0:
            return node
        gain, f, thr = found
        left = rows[x[rows, f] < thr]
        right = rows[x[rows, f] >= thr]
        return TreeNode(feature=f, threshold=thr, gain=gain, grad_sum=gs, hess_sum=hs,
                        left=build(left, depth + 1), right=build(right, depth + 1))

    return build(np.arange(x.shape[0]), 0)


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise FeatureCountMismatch(f"features {x.shape} and labels {y.shape} do not line up")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return x, y.astype(np.float64)


def fit(x, y, cfg: BoostConfig = BoostConfig(), features: Optional[Sequence[str]] = None) -> BoostedModel:
    """Boosted trees on the logistic loss; a single-class label set yields the clipped prior model."""
    x, y = _check_xy(x, y)
    if x.shape[0] < 4:
        raise TooFewSamples(f"need at least 4 samples, got {x.shape[0]}")
    names = list(features) if features is not None else [str(i) for i in range(x.shape[1])]
    if len(names) != x.shape[1]:
        raise FeatureCountMismatch(f"{len(names)} feature names for {x.shape[1]} columns")
    prior = float(np.clip(y.mean(), PRIOR_CLIP, 1 - PRIOR_CLIP))
    base = math.log(prior / (1 - prior))
    model = BoostedModel(base, [], cfg, names)
    margin = np.full(x.shape[0], base)
    model.train_loss.append(logistic_loss(margin, y))
    if y.min() == y.max():
        warnings.warn(DegenerateLabels("single-class labels; returning the constant prior model"), stacklevel=2)
        return model
    rng = np.random.default_rng(cfg.seed)
    n_sub = max(2, int(round(cfg.subsample * x.shape[0])))
    for _ in range(cfg.n_trees):
        p = sigmoid(margin)
        g, h = p - y, p * (1 - p)
        if cfg.subsample < 1:
            rows = np.sort(rng.choice(x.shape[0], n_sub, replace=False))
            tree = grow_tree(x[rows], g[rows], h[rows], cfg.max_depth, cfg.l2_lambda, cfg.min_child_hessian)
        else:
            tree = grow_tree(x, g, h, cfg.max_depth, cfg.l2_lambda, cfg.min_child_hessian)
        model.trees.append(tree)
        margin = margin + cfg.learning_rate * tree.apply(x)
        model.train_loss.append(logistic_loss(margin, y))
    return model


def predict_proba(model: BoostedModel, x, columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """Probabilities; with ``columns`` the model's features are picked out of ``x`` by name."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise FeatureCountMismatch(f"expected a 2-D feature matrix, got shape {x.shape}")
    if columns is not None:
        if len(columns) != x.shape[1]:
            raise FeatureCountMismatch(f"{len(columns)} column names for {x.shape[1]} columns")
        pos = {c: i for i, c in enumerate(columns)}
        missing = [f for f in model.features if f not in pos]
        if missing:
            raise FeatureCountMismatch(f"input lacks model features {missing[:5]}")
        x = x[:, [pos[f] for f in model.features]]
    elif x.shape[1] != model.n_features:
        raise FeatureCountMismatch(f"model uses {model.n_features} features, input has {x.shape[1]}")
    return sigmoid(model.margin(x))


# --- cross-validation and selection ----------------------------------------------------

def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Fold id per sample; classes are dealt round-robin so fold sizes differ by at most one."""
    y = np.asarray(y)
    for c in (0, 1):
        if (y == c).sum() < k:
            raise TooFewSamples(f"class {c} has {(y == c).sum()} samples, need >= {k} for {k}-fold CV")
    rng = np.random.default_rng(seed)
    order = np.concatenate([np.flatnonzero(y == c)[rng.permutation((y == c).sum())] for c in (0, 1)])
    folds = np.empty(y.size, dtype=np.int64)
    folds[order] = np.arange(y.size) % k
    return folds


def kfold_cv(x, y, cfg: BoostConfig = BoostConfig(), k: int = 5, seed: int = 0) -> tuple[list[float], float]:
    x, y = _check_xy(x, y)
    folds = stratified_folds(y, k, seed)
    aucs = []
    for f in range(k):
        test = folds == f
        model = fit(x[~test], y[~test], cfg)
        aucs.append(auc_score(predict_proba(model, x[test]), y[test]))
    return aucs, float(np.mean(aucs))


@dataclass
class SelectionResult:
    initial_auc: float
    trace: list  # (removed original column index, mean CV AUC afterwards)
    best_subset: list
    best_auc: float


def backward_feature_selection(x, y, cfg: BoostConfig = BoostConfig(), min_features: int = 1,
                               k: int = 5, seed: int = 0) -> SelectionResult:
    """Drop, one at a time, the feature whose removal gives the highest mean CV AUC.

    Ties go to the lowest original column index. The returned subset is the one with
    the best AUC seen along the trace (earliest on ties), including the full set.
    """
    x, y = _check_xy(x, y)
    nf = x.shape[1]
    if not 1 <= min_features <= nf:
        raise ValueError(f"min_features must lie in [1, {nf}]")
    current = list(range(nf))
    start = kfold_cv(x, y, cfg, k, seed)[1]
    best = (start, list(current))
    trace = []
    while len(current) > min_features:
        scores = []
        for j in current:
            cols = [c for c in current if c != j]
            scores.append((kfold_cv(x[:, cols], y, cfg, k, seed)[1], j))
        auc, drop = max(scores, key=lambda s: (s[0], -s[1]))
        current.remove(drop)
        trace.append((drop, auc))
        if auc > best[0]:
            best = (auc, list(current))
    return SelectionResult(start, trace, best[1], best[0])


# --- model zoo and files ---------------------------------------------------------------

def save_model(model: BoostedModel, path) -> None:
    write_bytes_if_changed(path, (json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n").encode())


def load_model(path) -> BoostedModel:
    try:
        return BoostedModel.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MalformedHeader(f"{path}: not a boosted-tree model file ({exc})") from exc


@dataclass
class ZooEntry:
    model_id: str
    config: BoostConfig
    cv_auc: float
    features: list


def train_zoo(x, y, names: Sequence[str], configs: Sequence[BoostConfig], k: int = 5, cv_seed: int = 0,
              select: bool = False, min_features: int = 1) -> list[tuple[ZooEntry, BoostedModel]]:
    """Cross-validate (optionally after backward selection) and refit every config on all data."""
    x, y = _check_xy(x, y)
    out = []
    for i, cfg in enumerate(configs):
        if select:
            sel = backward_feature_selection(x, y, cfg, min_features, k, cv_seed)
            cols, auc = sel.best_subset, sel.best_auc
        else:
            cols = list(range(x.shape[1]))
            auc = kfold_cv(x, y, cfg, k, cv_seed)[1]
        feats = [names[c] for c in cols]
        model = fit(x[:, cols], y, cfg, feats)
        out.append((ZooEntry(f"gbm{i:03d}", cfg, auc, feats), model))
    return out


ZOO_HEADER = ["model_id", "n_trees", "max_depth", "learning_rate", "l2_lambda", "subsample", "seed",
              "mean_cv_auc", "selected_features"]


def zoo_summary_csv(entries: Sequence[ZooEntry]) -> str:
    lines = [",".join(ZOO_HEADER)]
    for e in entries:
        c = e.config
        lines.append(",".join([e.model_id, str(c.n_trees), str(c.max_depth), repr(c.learning_rate),
                               repr(c.l2_lambda), repr(c.subsample), str(c.seed), repr(e.cv_auc),
                               ";".join(e.features)]))
    return "\n".join(lines) + "\n"
