"""Minibatch training with on-the-fly mirroring and early stopping on lesion-level AUC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..augment import read_archive
from ..ensemble import multiview_average
from ..metrics import auc_score
from .network import XmasNet
from .optim import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)


@dataclass
class SampleSet:
    """Samples (N, 3, 32, 32) with their labels and lesion provenance."""

    x: np.ndarray
    y: np.ndarray
    keys: list
    view_index: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_archive(cls, path) -> "SampleSet":
        manifest, x = read_archive(path)
        recs = manifest["records"]
        y = np.array([-1 if r["label"] is None else r["label"] for r in recs], dtype=np.int64)
        return cls(x, y, [(r["case_id"], r["finding_id"]) for r in recs],
                   np.array([r["view_index"] for r in recs], dtype=np.int64))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.x[idx], self.y[idx], [self.keys[i] for i in idx], self.view_index[idx])

    def lesion_labels(self) -> dict:
        return {k: int(y) for k, y in zip(self.keys, self.y)}


@dataclass
class TrainResult:
    net: XmasNet
    best_step: int
    best_auc: float
    history: list = field(default_factory=list)  # dicts: step, train_loss, val_auc


def predict(net: XmasNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Probability of the positive class for every sample (inference-mode BN)."""
    return net.predict_proba(x, batch_size)[:, 1]


def lesion_auc(net: XmasNet, samples: SampleSet) -> tuple[float, list, np.ndarray]:
    """AUC of multi-view averaged predictions, one score per lesion."""
    probs = predict(net, samples.x)
    keys, means = multiview_average(probs, samples.keys, samples.view_index)
    labels = samples.lesion_labels()
    return auc_score(means, [labels[k] for k in keys]), keys, means


def train(net: XmasNet, train_set: SampleSet, val_set: SampleSet, cfg: TrainConfig) -> TrainResult:
    """Adam training; keeps the parameter snapshot with the best validation AUC.

    Evaluates every ``cfg.eval_every`` steps (and at the last step) and stops after
    ``cfg.patience`` evaluations without improvement.
    """
    if (train_set.y < 0).any() or (val_set.y < 0).any():
        raise ValueError("training and validation samples must be labeled")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    best = (-np.inf, 0, net.snapshot())
    stale = 0
    losses: list[float] = []
    step = 0
    order = np.empty(0, dtype=np.int64)
    pos = 0
    while step < cfg.max_steps:
        if pos >= order.size:
            order = rng.permutation(len(train_set))
            pos = 0
        idx = np.sort(order[pos:pos + cfg.batch_size])
        pos += cfg.batch_size
        x = train_set.x[idx]
        flip = rng.random(idx.size) < cfg.mirror_prob
        if flip.any():
            x = x.copy()
            x[flip] = x[flip][..., ::-1]
        loss, grads = net.loss_and_grads(x, train_set.y[idx])
        adam_step(net.params, grads, state, cfg)
        losses.append(loss)
        step += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            auc = lesion_auc(net, val_set)[0]
            history.append({"step": step, "train_loss": float(np.mean(losses)), "val_auc": auc})
            log.info("step %d loss %.4f val_auc %.4f", step, np.mean(losses), auc)
            losses = []
            if auc > best[0]:
                best = (auc, step, net.snapshot())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    net.load_state(best[2])
    return TrainResult(net, best[1], float(best[0]), history)
