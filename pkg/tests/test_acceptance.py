"""One test per acceptance criterion; each prints a single PASS/FAIL line.

The phantom end-to-end criteria share one standard run (module fixture), so
criteria 8-11 take several minutes on a single core.
"""

import hashlib
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from lesionkit import gbm
from lesionkit.augment import CHANNEL_SETS, build_dataset, enumerate_views
from lesionkit.ensemble import PredictionTable, greedy_select
from lesionkit.harness.config import load_config
from lesionkit.harness.experiments import decoy_selection, informative_columns, null_control, timed_run
from lesionkit.metrics import auc_score
from lesionkit.radiomics import glcm_3d, haralick, read_feature_table, texture_features
from lesionkit.volgrid import Finding
from lesionkit.xmasnet import layers as L
from lesionkit.xmasnet.network import NetworkConfig, XmasNet
from oracles import (
    HAND_LABELS,
    HAND_MATRIX,
    glcm_oracle,
    haralick_oracle,
    max_rel_error,
    numeric_grad,
    pair_count_auc,
    random_masked_volume,
    simulate,
)

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "lesionkit" / "configs"

TABLE = [
    ("conv1", (32, 32, 32)),
    ("conv2", (32, 32, 32)),
    ("pool1", (16, 16, 32)),
    ("conv3", (16, 16, 64)),
    ("conv4", (16, 16, 64)),
    ("pool2", (8, 8, 64)),
    ("fc1", (1024,)),
    ("fc2", (256,)),
    ("softmax", (2,)),
]


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


def tree_hashes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# --- 1-7: structure and oracles ------------------------------------------------------

def test_01_architecture_shapes(report):
    t0 = time.perf_counter()
    net = XmasNet(NetworkConfig())
    ok = net.output_shapes(1) == TABLE and NetworkConfig().layer_shapes() == TABLE
    x = np.zeros((1, 3, 32, 32), np.float32)
    ok = ok and net.forward(x).shape == (1, 2)
    dt = time.perf_counter() - t0
    report(1, "architecture fidelity", ok and dt < 1.0, f"{len(TABLE)} layer shapes match, {dt:.3f} s")


def _proj(out, r):
    return float((out * r).sum())


def _gradcheck_suite(rng):
    """Max relative error per layer kind over five shapes each, all float64."""
    worst = {}

    def note(kind, err):
        worst[kind] = max(worst.get(kind, 0.0), err)

    for n, c, h, w_, k in [(1, 1, 3, 3, 1), (2, 3, 4, 5, 2), (3, 2, 6, 4, 3), (1, 4, 5, 5, 2), (2, 2, 2, 6, 4)]:
        x, w, b = rng.normal(size=(n, c, h, w_)), rng.normal(size=(k, c, 3, 3)), rng.normal(size=k)
        r = rng.normal(size=(n, k, h, w_))
        dx, dw, db = L.conv3x3_backward(r, L.conv3x3_forward(x, w, b)[1])
        f = lambda: _proj(L.conv3x3_forward(x, w, b)[0], r)
        for a, arr in ((dx, x), (dw, w), (db, b)):
            note("conv", max_rel_error(a, numeric_grad(f, arr)))

    for shape in [(2, 4, 3, 3), (3, 2, 2, 2), (5, 3), (2, 1, 4, 1), (7, 2)]:
        ch = shape[1]
        x, g, be = rng.normal(size=shape), rng.normal(size=ch), rng.normal(size=ch)
        rm, rv = rng.normal(size=ch), rng.uniform(0.5, 2, size=ch)
        r = rng.normal(size=shape)
        for train_mode in (True, False):
            f = lambda: _proj(L.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)[0], r)
            dx, dg, db = L.batchnorm_backward(r, L.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)[1])
            for a, arr in ((dx, x), (dg, g), (db, be)):
                note("batchnorm", max_rel_error(a, numeric_grad(f, arr)))

    for shape in [(1, 1, 2, 2), (2, 3, 4, 4), (1, 2, 6, 2), (3, 1, 2, 8), (2, 2, 4, 6)]:
        size = int(np.prod(shape))
        # distinct values far apart relative to the step: no kink or argmax flip
        x = (rng.permutation(size) - size / 2 + 0.5).reshape(shape) * 0.01
        r = rng.normal(size=shape)
        rp = rng.normal(size=(shape[0], shape[1], shape[2] // 2, shape[3] // 2))
        note("relu", max_rel_error(L.relu_backward(r, L.relu_forward(x)[1]),
                                   numeric_grad(lambda: _proj(L.relu_forward(x)[0], r), x)))
        note("maxpool", max_rel_error(L.maxpool2x2_backward(rp, L.maxpool2x2_forward(x)[1]),
                                      numeric_grad(lambda: _proj(L.maxpool2x2_forward(x)[0], rp), x)))

    for n, i, o in [(1, 3, 2), (4, 5, 3), (2, 1, 6), (3, 7, 1), (5, 4, 4)]:
        x, w, b, r = rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o), rng.normal(size=(n, o))
        f = lambda: _proj(L.fc_forward(x, w, b)[0], r)
        dx, dw, db = L.fc_backward(r, L.fc_forward(x, w, b)[1])
        for a, arr in ((dx, x), (dw, w), (db, b)):
            note("fc", max_rel_error(a, numeric_grad(f, arr)))

    for n in (1, 2, 3, 5, 8):
        z = rng.normal(size=(n, 2)) * 3
        y = rng.integers(0, 2, n)
        _, p = L.softmax_xent(z, y)
        note("softmax-xent", max_rel_error(L.softmax_xent_backward(p, y), numeric_grad(lambda: L.softmax_xent(z, y)[0], z)))
    return worst


def test_02_gradient_suite(report):
    t0 = time.perf_counter()
    worst = _gradcheck_suite(np.random.default_rng(2024))
    dt = time.perf_counter() - t0
    ok = len(worst) == 6 and max(worst.values()) < 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.1f} s"
    report(2, "gradient suite", ok, detail)


def test_03_augmentation_count(report):
    t0 = time.perf_counter()
    findings = [Finding(f"case{i // 2:03d}", i % 2 + 1, (0.0, 0.0, 0.0), i % 2) for i in range(274)]
    n = build_dataset({}, findings, enumerate_views(), CHANNEL_SETS["DAK"], metadata_only=True)
    dt = time.perf_counter() - t0
    report(3, "augmentation count", n == 207144 and dt < 10, f"{n} samples from 274 findings, {dt:.2f} s")


def test_04_auc_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        # every third set draws from three values only: heavy ties
        scores = rng.integers(0, 3, n) / 2 if done % 3 == 0 else np.round(rng.random(n), int(rng.integers(1, 4)))
        worst = max(worst, abs(auc_score(scores, labels) - pair_count_auc(scores.tolist(), labels.tolist())))
        done += 1
    dt = time.perf_counter() - t0
    report(4, "AUC oracle", worst <= 1e-12 and dt < 30, f"max |diff| {worst:.1e} over {done} sets, {dt:.1f} s")


def test_05_glcm_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        lv, mask = random_masked_volume(rng, max_side=4, ng=8)
        ours = haralick(glcm_3d(lv, mask, 8))
        ref = haralick_oracle(glcm_oracle(lv, mask, 8))
        worst = max(worst, max(abs(ours[k] - ref[k]) for k in ours))
    const = texture_features(np.full((3, 3, 3), 7.5), np.ones((3, 3, 3), bool))
    exact = const["energy"] == 1.0 and const["contrast"] == 0.0
    dt = time.perf_counter() - t0
    report(5, "GLCM oracle", worst < 1e-9 and exact and dt < 10,
           f"max |diff| {worst:.1e} on 20 volumes, constant region energy {const['energy']} contrast "
           f"{const['contrast']}, {dt:.2f} s")


def test_06_boosting_oracle(report):
    t0 = time.perf_counter()
    F = Fraction
    worst = 0.0
    tables = [
        ([1, 1, 2, 2], [F(-1), F(-1, 2), F(1, 2), F(1)], [F(1, 4), F(1, 5), F(3, 10), F(1, 4)], F(1)),
        ([0, 1, 2, 3, 4], [F(2), F(1), F(-1), F(-3, 2), F(-2)], [F(1, 2)] * 5, F(0)),
        ([5, 3, 3, 1, 8, 8], [F(1, 3), F(-2, 3), F(1), F(-1), F(1, 2), F(-1, 4)], [F(1, 5), F(2, 5), F(1, 10),
                                                                                     F(1, 4), F(1, 2), F(1, 3)], F(5)),
    ]
    for xs, g, h, lam in tables:
        x = np.array(xs, float)[:, None]
        # closed form over every boundary with exact rationals
        best = None
        for thr in sorted({(a + b) / 2 for a, b in zip(sorted(set(xs)), sorted(set(xs))[1:])}):
            gl = sum(gi for xi, gi in zip(xs, g) if xi < thr)
            hl = sum(hi for xi, hi in zip(xs, h) if xi < thr)
            gr, hr = sum(g) - gl, sum(h) - hl
            gain = F(1, 2) * (gl**2 / (hl + lam) + gr**2 / (hr + lam) - sum(g) ** 2 / (sum(h) + lam))
            if best is None or gain > best[0]:
                best = (gain, thr, -gl / (hl + lam), -gr / (hr + lam))
        tree = gbm.grow_tree(x, np.array(g, float), np.array(h, float), max_depth=1, lam=float(lam))
        worst = max(worst, abs(tree.gain - float(best[0])), abs(tree.threshold - best[1]),
                    abs(tree.left.weight - float(best[2])), abs(tree.right.weight - float(best[3])))
        root = gbm.grow_tree(x, np.array(g, float), np.array(h, float), max_depth=0, lam=float(lam))
        worst = max(worst, abs(root.weight - float(-sum(g) / (sum(h) + lam))))
    monotone = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(80, 5))
        y = (x[:, 0] + rng.normal(size=80) > 0).astype(int)
        loss = gbm.fit(x, y, gbm.BoostConfig(n_trees=30)).train_loss
        monotone &= all(b <= a + 1e-12 for a, b in zip(loss, loss[1:]))
    dt = time.perf_counter() - t0
    report(6, "boosting oracle", worst < 1e-9 and monotone and dt < 30,
           f"max |diff| {worst:.1e} on {len(tables)} hand tables, loss non-increasing on 10 datasets: {monotone}, "
           f"{dt:.2f} s")


def test_07_greedy_ensemble_oracle(report):
    t0 = time.perf_counter()
    w = greedy_select(PredictionTable(("A", "B", "C"), HAND_MATRIX, HAND_LABELS), max_iters=25, patience=5)
    counts, trace = simulate(HAND_MATRIX.tolist(), HAND_LABELS.tolist(), 25, 5)
    weights_ok = all(w.weights[m] == c / sum(counts) for m, c in zip(w.model_ids, counts))
    same = list(w.counts) == counts and np.allclose(w.auc_trace, trace, rtol=0, atol=1e-12) and weights_ok
    monotone = all(b >= a for a, b in zip(w.auc_trace, w.auc_trace[1:]))
    singleton = max(auc_score(r, HAND_LABELS) for r in HAND_MATRIX)
    dt = time.perf_counter() - t0
    report(7, "greedy ensemble oracle", same and monotone and w.auc_trace[-1] >= singleton and dt < 5,
           f"counts {list(w.counts)} vs simulation {counts}, final AUC {w.auc_trace[-1]:.4f} >= best single "
           f"{singleton:.4f}, {dt:.2f} s")


# --- 8-11: phantom end to end -----------------------------------------------------------

@pytest.fixture(scope="module")
def standard(tmp_path_factory):
    return timed_run(load_config(CONFIGS / "phantom.yaml"), tmp_path_factory.mktemp("standard"))


@pytest.mark.slow
def test_08_phantom_cnn(standard, tmp_path, report):
    pipe, times = standard
    summary = json.loads(pipe.p("cnn", "summary.json").read_text())
    best = {m["channel_set"]: m["best_val_auc"] for m in summary}
    steps_ok = all(m["best_step"] <= 2000 for m in summary)
    total = sum(times[s] for s in ("phantom", "preprocess", "augment", "train-cnn"))
    null = null_control(load_config(CONFIGS / "null.yaml"), tmp_path)
    ok = (set(best) == set(CHANNEL_SETS) and min(best.values()) >= 0.90 and steps_ok and total <= 15 * 60
          and 0.35 <= null.auc <= 0.65)
    detail = (", ".join(f"{cs} {a:.4f}" for cs, a in sorted(best.items()))
              + f"; {total:.0f} s on this machine; null control AUC {null.auc:.4f} on {null.n_lesions} lesions")
    report(8, "phantom end-to-end CNN", ok, detail)


@pytest.mark.slow
def test_09_phantom_radiomics_gbm(standard, report):
    pipe, times = standard
    keys, labels, matrix = read_feature_table(pipe.p("features", "features.csv"))
    with open(pipe.p("gbm", "zoo.csv")) as fh:
        rows = [ln.split(",") for ln in fh.read().splitlines()[1:]]
    aucs = [float(r[7]) for r in rows]
    elapsed = times["features"] + times["train-gbm"]

    t0 = time.perf_counter()
    decoys = decoy_selection(*informative_columns(pipe.p("features", "features.csv")), seed=0)
    elapsed += time.perf_counter() - t0

    ok = matrix.shape[1] == 87 and min(aucs) >= 0.85 and decoys.fraction >= 0.8 and elapsed <= 300
    report(9, "phantom end-to-end radiomics + GBM", ok,
           f"{len(aucs)} configs, mean CV AUC min {min(aucs):.4f} max {max(aucs):.4f}; "
           f"{decoys.removed_before_informative}/{decoys.n_decoys} decoys removed before any informative "
           f"feature; {elapsed:.0f} s")


@pytest.mark.slow
def test_10_ensemble_dominance(standard, report):
    pipe, _ = standard
    summary = json.loads(pipe.p("eval", "summary.json").read_text())
    cnn = max(v["auc"] for k, v in summary.items() if k.startswith("cnn-"))
    boost = max(v["auc"] for k, v in summary.items() if k.startswith("gbm"))
    ens = summary["ensemble"]["auc"]
    report(10, "ensemble dominance", ens >= max(cnn, boost) - 1e-9,
           f"validation AUC ensemble {ens:.4f}, best CNN {cnn:.4f}, best GBM {boost:.4f}")


@pytest.mark.slow
def test_11_determinism(standard, tmp_path, report):
    pipe, _ = standard
    again, _ = timed_run(load_config(CONFIGS / "phantom.yaml"), tmp_path / "again")
    a, b = tree_hashes(pipe.out), tree_hashes(again.out)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    payloads = [k for k in a if k.endswith("model.f32")]
    ok = not differing and "eval/roc.svg" in a and len(payloads) == 4
    report(11, "determinism", ok, f"{len(a)} files compared, {len(differing)} differ "
                                  f"({len(payloads)} model payloads, ROC SVG included)")
