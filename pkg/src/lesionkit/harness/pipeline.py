"""End-to-end stages over one output directory.

Layout under ``out``::

    phantom/            cases/<id>/*.nvol.json, findings.csv
    preprocessed/       cases/<id>/*.nvol.json (T2 frame), findings.csv (refined), masks.json, split.json
    augment/            <CS>_<split>.json + .f32 sample archives
    features/           features.csv
    cnn/                <model id>/model.json + .f32, <model id>/history.json, summary.json
    gbm/                zoo.csv, <model id>.json, selected.json
    ensemble/           val_predictions.csv, weights.json
    predictions/        <split>_predictions.csv (members plus the ``ensemble`` rows)
    eval/               summary.json, roc_<model>.csv, roc.svg
    manifests/          <stage>.json

Every stage writes a manifest with the hashes of its inputs and outputs and the
digest of the config sections it reads. A stage whose manifest still matches is
skipped, and all writers leave identical bytes untouched, so a rerun is a no-op.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import gbm
from ..augment import CHANNEL_SETS, build_datasets, enumerate_views
from ..ensemble import (
    EnsembleWeights,
    PredictionTable,
    ensemble_predict,
    greedy_select,
    lesion_table,
    multiview_average,
    read_predictions,
    write_predictions,
)
from ..errors import DataError, EmptyRegion, SeedOutOfBounds
from ..metrics import roc_auc, summarize, write_roc_csv, write_roc_svg
from ..preprocess import (
    LesionMask,
    SplitPlan,
    ball_mask,
    lesion_mask,
    mask_centroid_world,
    read_exclusions,
    stratified_split,
)
from ..radiomics import FEATURE_NAMES, extract_features, read_feature_table, write_feature_table
from ..volgrid import (
    CaseBundle,
    Finding,
    read_case,
    read_findings,
    resample_isotropic,
    resample_to_reference,
    write_bytes_if_changed,
    write_case,
    write_findings,
)
from ..xmasnet.io import load_model as load_cnn
from ..xmasnet.io import save_model as save_cnn
from ..xmasnet.network import NetworkConfig, XmasNet
from ..xmasnet.optim import TrainConfig
from ..xmasnet.train import SampleSet, predict, train
from .config import RunConfig
from .phantom import PhantomSpec, generate_phantoms

log = logging.getLogger(__name__)

STAGES = ("phantom", "preprocess", "augment", "features", "train-cnn", "train-gbm",
          "select-ensemble", "predict", "evaluate")
ENSEMBLE_ID = "ensemble"


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Order-preserving map; a process pool when more than one job is allowed."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def cnn_model_id(channel_set: str, lr: float, seed: int) -> str:
    return f"cnn-{channel_set}-lr{lr:g}-s{seed}"


# --- workers (top level so a process pool can pickle them) ---------------------------

def _preprocess_case(args):
    case_dir, out_dir, findings, pcfg = args
    bundle = read_case(case_dir, findings)
    bundle.check()
    t2 = resample_isotropic(bundle.channels["T2"], pcfg["target_spacing_mm"])
    channels = {m: (t2 if m == "T2" else resample_to_reference(v, t2)) for m, v in bundle.channels.items()}
    write_case(CaseBundle(bundle.case_id, channels), out_dir)
    refined, masks = [], {}
    for f in bundle.findings:
        try:
            m = lesion_mask(channels["DWI"], f.pos_world, pcfg["rel_threshold"], pcfg["max_radius_mm"],
                            pcfg["morph_radius_vox"])
            pos, fallback = tuple(float(v) for v in mask_centroid_world(channels["DWI"], m)), False
        except (EmptyRegion, SeedOutOfBounds) as exc:
            log.warning("%s/%d: region growing failed (%s); using a %.1f mm ball", f.case_id, f.finding_id,
                        exc, pcfg["fallback_radius_mm"])
            m, pos, fallback = ball_mask(t2, f.pos_world, pcfg["fallback_radius_mm"]), f.pos_world, True
        refined.append(Finding(f.case_id, f.finding_id, pos, f.label))
        masks[f"{f.case_id}/{f.finding_id}"] = {"seed_index": [int(i) for i in m.seed_index],
                                                "fallback": fallback, "voxels": m.voxels.tolist()}
    return refined, masks


def _train_cnn_job(args):
    out, model_id, channel_set, tcfg = args
    train_set = SampleSet.from_archive(out / "augment" / f"{channel_set}_train.json")
    val_set = SampleSet.from_archive(out / "augment" / f"{channel_set}_val.json")
    net = XmasNet(NetworkConfig(), seed=tcfg.seed)
    result = train(net, train_set, val_set, tcfg)
    model_dir = out / "cnn" / model_id
    save_cnn(result.net, model_dir / "model.json")
    write_bytes_if_changed(model_dir / "history.json", _dump(result.history))
    return {"model_id": model_id, "channel_set": channel_set, "learning_rate": tcfg.learning_rate,
            "seed": tcfg.seed, "best_step": result.best_step, "best_val_auc": result.best_auc}


# --- the run -------------------------------------------------------------------------

class Pipeline:
    """All stages of one run, rooted at ``out``."""

    def __init__(self, cfg: RunConfig, out, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.jobs = max(1, int(jobs))

    # paths
    def p(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    @property
    def source_cases(self) -> Path:
        return Path(self.cfg.data.cases_dir) if self.cfg.data.cases_dir else self.p("phantom", "cases")

    @property
    def source_findings(self) -> Path:
        return Path(self.cfg.data.findings) if self.cfg.data.findings else self.p("phantom", "findings.csv")

    # stage bookkeeping
    def _sections(self, stage: str) -> dict:
        c = self.cfg.to_dict()
        if stage == "train-cnn":
            return {"seed": c["seed"], "cnn": c["cnn"], "channel_sets": c["augment"]["channel_sets"]}
        pick = {
            "phantom": ["phantom"],
            "preprocess": ["seed", "data", "preprocess"],
            "augment": ["augment"],
            "features": [],
            "train-gbm": ["seed", "gbm"],
            "select-ensemble": ["ensemble"],
            "predict": [],
            "evaluate": [],
        }[stage]
        return {k: c[k] for k in pick}

    def _inputs(self, stage: str) -> list[Path]:
        pre = ["preprocessed"]
        dirs = {
            "phantom": [],
            "preprocess": [self.source_cases, self.source_findings]
            + ([Path(self.cfg.data.exclusions)] if self.cfg.data.exclusions else []),
            "augment": pre,
            "features": pre,
            "train-cnn": ["augment"],
            "train-gbm": ["features", "preprocessed/split.json"],
            "select-ensemble": ["augment", "features", "cnn", "gbm", "preprocessed/split.json",
                                "preprocessed/findings.csv"],
            "predict": ["augment", "features", "cnn", "gbm", "ensemble/weights.json", "preprocessed/split.json",
                        "preprocessed/findings.csv"],
            "evaluate": ["predictions", "preprocessed/findings.csv"],
        }[stage]
        files = []
        for d in dirs:
            d = d if isinstance(d, Path) else self.p(d)
            if d.is_dir():
                files.extend(sorted(q for q in d.rglob("*") if q.is_file()))
            elif d.exists():
                files.append(d)
            else:
                raise DataError(f"stage {stage}: missing input {d}; run the earlier stages first")
        return files

    def _rel(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.out.resolve()).as_posix()
        except ValueError:
            return str(path)

    def _hashes(self, files) -> dict:
        return {self._rel(Path(f)): sha256_file(f) for f in files}

    def _manifest(self, stage: str, inputs: dict) -> dict:
        return {"stage": stage, "seed": self.cfg.seed,
                "config_sha256": hashlib.sha256(json.dumps(self._sections(stage), sort_keys=True).encode())
                .hexdigest(),
                "config": self._sections(stage), "inputs": inputs}

    def _up_to_date(self, stage: str, expected: dict) -> bool:
        path = self.p("manifests", f"{stage}.json")
        if not path.exists():
            return False
        try:
            old = json.loads(path.read_text())
        except ValueError:
            return False
        if any(old.get(k) != v for k, v in expected.items()):
            return False
        outputs = old.get("outputs", {})
        for rel, digest in outputs.items():
            f = self.p(rel)
            if not f.exists() or sha256_file(f) != digest:
                return False
        return bool(outputs)

    def run_stage(self, stage: str, force: bool = False, **kwargs) -> bool:
        """Run one stage unless its manifest shows it is complete; True when it ran."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        expected = self._manifest(stage, self._hashes(self._inputs(stage)))
        if kwargs:
            expected["options"] = kwargs
        if not force and self._up_to_date(stage, expected):
            log.info("%s: up to date", stage)
            return False
        log.info("%s: running", stage)
        outputs = getattr(self, "stage_" + stage.replace("-", "_"))(**kwargs)
        expected["outputs"] = self._hashes(sorted(set(outputs)))
        write_bytes_if_changed(self.p("manifests", f"{stage}.json"), _dump(expected))
        return True

    def run_all(self, stages: Sequence[str] = STAGES, force: bool = False) -> None:
        for s in stages:
            if s == "phantom" and self.cfg.data.cases_dir:
                continue
            self.run_stage(s, force)

    # shared loaders
    def split(self) -> SplitPlan:
        return SplitPlan.load(self.p("preprocessed", "split.json"))

    def findings(self) -> list[Finding]:
        return read_findings(self.p("preprocessed", "findings.csv"))

    def split_findings(self, name: str) -> list[Finding]:
        fs = self.findings()
        if name == "test":
            return [f for f in fs if f.label is None]
        cases = set(getattr(self.split(), f"{name}_case_ids"))
        return [f for f in fs if f.case_id in cases and f.label is not None]

    def bundles(self, findings: Sequence[Finding]) -> dict[str, CaseBundle]:
        ids = sorted({f.case_id for f in findings})
        return {c: read_case(self.p("preprocessed", "cases", c), findings) for c in ids}

    def pool(self) -> list[str]:
        """Model ids offered to ensemble selection, in id order."""
        ids = []
        if self.cfg.ensemble.pool in ("all", "cnn"):
            ids += [m["model_id"] for m in json.loads(self.p("cnn", "summary.json").read_text())]
        if self.cfg.ensemble.pool in ("all", "gbm"):
            ids += json.loads(self.p("gbm", "selected.json").read_text())
        return sorted(ids)

    # stages
    def stage_phantom(self) -> list[Path]:
        ph = self.cfg.phantom
        spec = PhantomSpec(n_cases=ph.n_cases, lesions_per_case=ph.lesions_per_case,
                           significant_fraction=ph.significant_fraction, contrast_gap=ph.contrast_gap,
                           noise_sigma=ph.noise_sigma, amplitude_jitter=ph.amplitude_jitter, seed=ph.seed)
        generate_phantoms(spec, self.p("phantom"))
        return sorted(q for q in self.p("phantom").rglob("*") if q.is_file())

    def stage_preprocess(self) -> list[Path]:
        pcfg = asdict(self.cfg.preprocess)
        findings = read_findings(self.source_findings)
        excluded = read_exclusions(self.cfg.data.exclusions) if self.cfg.data.exclusions else set()
        case_ids = sorted({f.case_id for f in findings} - excluded)
        jobs = [(self.source_cases / c, self.p("preprocessed", "cases", c), [f for f in findings if f.case_id == c],
                 pcfg) for c in case_ids]
        refined, masks = [], {}
        for r, m in _pmap(_preprocess_case, jobs, self.jobs):
            refined.extend(r)
            masks.update(m)
        refined.sort(key=lambda f: f.key)
        write_findings(refined, self.p("preprocessed", "findings.csv"))
        write_bytes_if_changed(self.p("preprocessed", "masks.json"),
                               json.dumps(masks, sort_keys=True, separators=(",", ":")).encode())
        labelled = [f for f in refined if f.label is not None]
        stratified_split(labelled, pcfg["val_fraction"], self.cfg.seed).save(self.p("preprocessed", "split.json"))
        return sorted(q for q in self.p("preprocessed").rglob("*") if q.is_file())

    def views(self, split: str):
        a = self.cfg.augment
        if split == "train":
            return enumerate_views(a.train_rotations, a.train_shears)
        return enumerate_views(a.val_rotations, a.val_shears, translate=a.val_translate)

    def stage_augment(self) -> list[Path]:
        sets = [CHANNEL_SETS[c] for c in self.cfg.augment.channel_sets]
        outputs = []
        for split in ("train", "val", "test"):
            fs = self.split_findings(split)
            if not fs:
                continue
            paths = [self.p("augment", f"{c.code}_{split}.json") for c in sets]
            build_datasets(self.bundles(fs), fs, self.views(split), sets, paths)
            for q in paths:
                outputs += [q, q.with_suffix(".f32")]
        return outputs

    def masks(self) -> dict:
        return json.loads(self.p("preprocessed", "masks.json").read_text())

    def stage_features(self) -> list[Path]:
        fs = self.findings()
        bundles = self.bundles(fs)
        masks = self.masks()
        rows = []
        for f in fs:
            ref = bundles[f.case_id].channels["T2"]
            m = np.zeros(ref.dims, dtype=bool)
            entry = masks[f"{f.case_id}/{f.finding_id}"]
            m[tuple(np.asarray(entry["voxels"], dtype=np.int64).T)] = True
            rows.append(extract_features(bundles[f.case_id], f, LesionMask(m, tuple(entry["seed_index"]))))
        path = self.p("features", "features.csv")
        write_feature_table([f.key for f in fs], [f.label for f in fs],
                            np.array(rows).reshape(len(rows), len(FEATURE_NAMES)), path)
        return [path]

    def stage_train_cnn(self) -> list[Path]:
        c = self.cfg.cnn
        jobs = []
        for cs in self.cfg.augment.channel_sets:
            for lr in c.learning_rates:
                for s in c.seeds:
                    tcfg = TrainConfig(learning_rate=lr, weight_decay=c.weight_decay, batch_size=c.batch_size,
                                       max_steps=c.max_steps, eval_every=c.eval_every, patience=c.patience,
                                       mirror_prob=c.mirror_prob, seed=self.cfg.seed * 1000 + s)
                    jobs.append((self.out, cnn_model_id(cs, lr, s), cs, tcfg))
        summary = _pmap(_train_cnn_job, jobs, self.jobs)
        for row in summary:
            print(f"{row['model_id']}: best val AUC {row['best_val_auc']:.4f} at step {row['best_step']}")
        write_bytes_if_changed(self.p("cnn", "summary.json"), _dump(summary))
        outputs = [self.p("cnn", "summary.json")]
        for row in summary:
            d = self.p("cnn", row["model_id"])
            outputs += [d / "model.json", d / "model.f32", d / "history.json"]
        return outputs

    def feature_rows(self, findings: Sequence[Finding]) -> np.ndarray:
        keys, _, matrix = read_feature_table(self.p("features", "features.csv"))
        index = {k: i for i, k in enumerate(keys)}
        missing = [f.key for f in findings if f.key not in index]
        if missing:
            raise DataError(f"no features for lesions {missing[:3]}")
        return matrix[[index[f.key] for f in findings]]

    def stage_train_gbm(self) -> list[Path]:
        g = self.cfg.gbm
        fs = self.split_findings("train")
        x, y = self.feature_rows(fs), np.array([f.label for f in fs])
        grid = {"max_depth": g.max_depth, "learning_rate": g.learning_rate, "l2_lambda": g.l2_lambda}
        configs = []
        for s in g.seeds:
            base = gbm.BoostConfig(n_trees=g.n_trees, min_child_hessian=g.min_child_hessian,
                                   subsample=g.subsample, seed=self.cfg.seed * 1000 + s)
            configs += gbm.grid_configs(base, grid)
        zoo = gbm.train_zoo(x, y, FEATURE_NAMES, configs, g.k_folds, self.cfg.seed, g.backward_selection,
                            g.min_features)
        write_bytes_if_changed(self.p("gbm", "zoo.csv"), gbm.zoo_summary_csv([e for e, _ in zoo]).encode())
        ranked = sorted(zoo, key=lambda em: (-em[0].cv_auc, em[0].model_id))[: g.top_k]
        outputs = [self.p("gbm", "zoo.csv"), self.p("gbm", "selected.json")]
        for e, model in ranked:
            print(f"{e.model_id}: mean CV AUC {e.cv_auc:.4f}")
            gbm.save_model(model, self.p("gbm", f"{e.model_id}.json"))
            outputs.append(self.p("gbm", f"{e.model_id}.json"))
        ids = sorted(e.model_id for e, _ in ranked)
        write_bytes_if_changed(self.p("gbm", "selected.json"), _dump(ids))
        return outputs

    def member_rows(self, split: str, model_ids: Sequence[str]) -> list[tuple]:
        """Per-view prediction rows of every requested model on one split."""
        fs = sorted(self.split_findings(split), key=lambda f: f.key)
        if not fs:
            raise DataError(f"split {split!r} holds no findings")
        rows = []
        summary = {m["model_id"]: m for m in json.loads(self.p("cnn", "summary.json").read_text())} \
            if self.p("cnn", "summary.json").exists() else {}
        archives: dict[str, SampleSet] = {}
        x_feat = None
        for mid in model_ids:
            if mid in summary:
                cs = summary[mid]["channel_set"]
                if cs not in archives:
                    archives[cs] = SampleSet.from_archive(self.p("augment", f"{cs}_{split}.json"))
                samples = archives[cs]
                probs = predict(load_cnn(self.p("cnn", mid, "model.json")), samples.x)
                rows += [(mid, k[0], k[1], int(v), float(p)) for k, v, p in zip(samples.keys, samples.view_index,
                                                                                probs)]
            else:
                if x_feat is None:
                    x_feat = self.feature_rows(fs)
                model = gbm.load_model(self.p("gbm", f"{mid}.json"))
                probs = gbm.predict_proba(model, x_feat, columns=FEATURE_NAMES)
                rows += [(mid, f.case_id, f.finding_id, 0, float(p)) for f, p in zip(fs, probs)]
        return rows

    def stage_select_ensemble(self) -> list[Path]:
        e = self.cfg.ensemble
        rows = self.member_rows("val", self.pool())
        write_predictions(rows, self.p("ensemble", "val_predictions.csv"))
        labels = {f.key: f.label for f in self.split_findings("val")}
        table = lesion_table(rows, labels)
        weights = greedy_select(table, e.max_iters, e.patience)
        weights.save(self.p("ensemble", "weights.json"))
        print(f"ensemble: val AUC {weights.auc_trace[-1]:.4f} from "
              + ", ".join(f"{m} x{c}" for m, c in zip(weights.model_ids, weights.counts) if c))
        return [self.p("ensemble", "val_predictions.csv"), self.p("ensemble", "weights.json")]

    def stage_predict(self, split: str = "val") -> list[Path]:
        weights = EnsembleWeights.load(self.p("ensemble", "weights.json"))
        rows = self.member_rows(split, weights.model_ids)
        per_model = {}
        keys = sorted(f.key for f in self.split_findings(split))
        for mid in weights.model_ids:
            rs = [r for r in rows if r[0] == mid]
            got, means = multiview_average([r[4] for r in rs], [(r[1], r[2]) for r in rs], [r[3] for r in rs],
                                           expected=keys)
            per_model[mid] = np.asarray(means)
        blend = ensemble_predict(weights, per_model)
        rows += [(ENSEMBLE_ID, k[0], k[1], 0, float(p)) for k, p in zip(keys, blend)]
        path = self.p("predictions", f"{split}_predictions.csv")
        write_predictions(rows, path)
        return [path]

    def stage_evaluate(self, split: str = "val") -> list[Path]:
        return evaluate(self.p("predictions", f"{split}_predictions.csv"), self.p("preprocessed", "findings.csv"),
                        self.p("eval"))


# --- evaluation on any prediction file ------------------------------------------------

def lesion_scores(predictions_csv, findings_csv) -> PredictionTable:
    """Lesion-level table of every model in a prediction file against labelled findings."""
    rows = read_predictions(predictions_csv)
    present = {(r[1], r[2]) for r in rows}
    labels = {f.key: f.label for f in read_findings(findings_csv) if f.label is not None and f.key in present}
    if not labels:
        raise DataError(f"{predictions_csv}: no predicted lesion has a label")
    return lesion_table(rows, labels)


def evaluate(predictions_csv, findings_csv, out_dir, plot: Optional[Sequence[str]] = None) -> list[Path]:
    """Per-model summaries, ROC CSVs and one SVG; prints the AUCs with 4 decimals."""
    table = lesion_scores(predictions_csv, findings_csv)
    out_dir = Path(out_dir)
    summary, curves = {}, {}
    outputs = []
    for mid, row in zip(table.model_ids, table.matrix):
        curve, auc = roc_auc(row, table.labels)
        curves[mid] = (curve, auc)
        summary[mid] = summarize(row, table.labels)
        path = out_dir / f"roc_{mid}.csv"
        write_roc_csv(curve, path)
        outputs.append(path)
    for mid in table.model_ids:
        if mid != ENSEMBLE_ID:
            print(f"{mid} AUC {summary[mid]['auc']:.4f}")
    if ENSEMBLE_ID in summary:
        s = summary[ENSEMBLE_ID]
        print(f"{ENSEMBLE_ID} AUC {s['auc']:.4f} sensitivity {s['sensitivity']:.4f} specificity {s['specificity']:.4f}")
    write_bytes_if_changed(out_dir / "summary.json", _dump(summary))
    outputs.append(out_dir / "summary.json")
    chosen = plot if plot is not None else default_plot(summary)
    unknown = [m for m in chosen if m not in curves]
    if unknown:
        raise DataError(f"no predictions for models {unknown}")
    write_roc_svg({m: curves[m] for m in chosen}, out_dir / "roc.svg")
    outputs.append(out_dir / "roc.svg")
    return outputs


def default_plot(summary: dict) -> list[str]:
    """The ensemble and the best CNN and boosted-tree members; every model when there are few."""
    if len(summary) <= 3:
        return sorted(summary)
    chosen = []
    for prefix in ("cnn-", "gbm"):
        family = sorted((m for m in summary if m.startswith(prefix)), key=lambda m: (-summary[m]["auc"], m))
        chosen += family[:1]
    if ENSEMBLE_ID in summary:
        chosen.append(ENSEMBLE_ID)
    return chosen or sorted(summary)[:8]
