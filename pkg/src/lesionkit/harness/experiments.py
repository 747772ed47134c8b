"""Control experiments on phantom runs: null-label CNN control, decoy feature selection, timing."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import gbm
from ..augment import CHANNEL_SETS, build_datasets
from ..metrics import auc_score
from ..radiomics import FEATURE_NAMES, read_feature_table
from ..xmasnet.io import load_model
from ..xmasnet.train import SampleSet, lesion_auc
from .config import RunConfig
from .pipeline import STAGES, Pipeline


def timed_run(cfg: RunConfig, out, stages: Sequence[str] = STAGES, jobs: int = 1) -> tuple[Pipeline, dict]:
    """Run stages in order; returns the pipeline and seconds per stage."""
    pipe = Pipeline(cfg, out, jobs)
    times = {}
    for stage in stages:
        t0 = time.perf_counter()
        pipe.run_stage(stage)
        times[stage] = time.perf_counter() - t0
    return pipe, times


@dataclass
class NullControl:
    auc: float
    n_lesions: int
    model_id: str


def null_control(cfg: RunConfig, out, channel_set: str = "DAK", held_cases: int = 60, held_seed: int = 101,
                 jobs: int = 1) -> NullControl:
    """Train on label-free phantoms, then score an independent label-free set.

    ``cfg`` should have ``contrast_gap`` 0. The held-out set reuses it with its
    own case count and phantom seed, and every lesion is scored with the
    validation views, so the AUC rests on far more lesions than one split.
    """
    out = Path(out)
    train_cfg = copy.deepcopy(cfg)
    train_cfg.augment.channel_sets = (channel_set,)
    trained, _ = timed_run(train_cfg, out / "train", ("phantom", "preprocess", "augment", "train-cnn"), jobs)
    held_cfg = copy.deepcopy(cfg)
    held_cfg.phantom.n_cases, held_cfg.phantom.seed = held_cases, held_seed
    held, _ = timed_run(held_cfg, out / "held", ("phantom", "preprocess"), jobs)
    findings = [f for f in held.findings() if f.label is not None]
    archive = out / "held" / f"{channel_set}_all.json"
    build_datasets(held.bundles(findings), findings, trained.views("val"), [CHANNEL_SETS[channel_set]], [archive])
    model_id = json.loads(trained.p("cnn", "summary.json").read_text())[0]["model_id"]
    net = load_model(trained.p("cnn", model_id, "model.json"))
    auc = lesion_auc(net, SampleSet.from_archive(archive))[0]
    return NullControl(float(auc), len(findings), model_id)


INFORMATIVE = ("KTRANS_mean", "ADC_min")


@dataclass
class DecoyResult:
    removed_before_informative: int
    n_decoys: int
    trace: list

    @property
    def fraction(self) -> float:
        return self.removed_before_informative / self.n_decoys


def decoy_selection(x_informative: np.ndarray, y, seed: int = 0, n_decoys: int = 10,
                    cfg: gbm.BoostConfig = gbm.BoostConfig(n_trees=30, max_depth=2), k: int = 5) -> DecoyResult:
    """Append N(0,1) decoy columns, shuffle column order, run backward selection.

    Counts how many decoys are removed before the first informative column.
    """
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    cols = np.c_[x_informative, rng.normal(size=(len(y), n_decoys))]
    order = rng.permutation(cols.shape[1])
    x = cols[:, order]
    informative = {int(np.flatnonzero(order == j)[0]) for j in range(x_informative.shape[1])}
    res = gbm.backward_feature_selection(x, y, cfg, min_features=1, k=k, seed=seed)
    removed = 0
    for col, _ in res.trace:
        if col in informative:
            break
        removed += 1
    return DecoyResult(removed, n_decoys, res.trace)


def informative_columns(features_csv, names: Sequence[str] = INFORMATIVE) -> tuple[np.ndarray, np.ndarray]:
    """Named feature columns and labels of the labelled lesions in a feature table."""
    _, labels, matrix = read_feature_table(features_csv)
    keep = [i for i, lab in enumerate(labels) if lab is not None]
    x = matrix[keep][:, [FEATURE_NAMES.index(n) for n in names]]
    return x, np.array([labels[i] for i in keep])


def feature_aucs(features_csv) -> list[tuple[float, str]]:
    """Direction-free single-feature AUC of every feature, best first."""
    _, labels, matrix = read_feature_table(features_csv)
    keep = [i for i, lab in enumerate(labels) if lab is not None]
    y = [labels[i] for i in keep]
    out = []
    for j, name in enumerate(FEATURE_NAMES):
        a = auc_score(matrix[keep, j], y)
        out.append((max(a, 1 - a), name))
    return sorted(out, key=lambda t: (-t[0], t[1]))
