"""Engineered lesion features: first-order statistics and 3D GLCM texture.

The fixed 87-entry feature order lives in ``feature_manifest.json`` next to this
module; ``FEATURE_NAMES`` is built in code and ``load_manifest`` checks that the
two agree.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FeatureCountMismatch, MalformedHeader, NoValidPairs, ShapeMismatch
from .preprocess import LesionMask
from .volgrid import MODALITIES, CaseBundle, Finding, write_bytes_if_changed

N_LEVELS = 32
_BIN_EPS = 1e-12

# the 13 unit offsets whose first non-zero component is positive
DIRECTIONS = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
)

FIRST_ORDER = ("mean", "std", "min", "max", "skewness", "kurtosis")
TEXTURE = (
    "energy", "contrast", "correlation", "variance", "homogeneity",
    "sum_average", "sum_variance", "sum_entropy", "entropy",
    "difference_variance", "difference_entropy", "imc1", "imc2",
    "autocorrelation", "dissimilarity",
)
GLOBAL = ("lesion_volume_mm3", "surface_to_volume", "adc_t2_ratio")
FEATURE_NAMES = tuple(f"{m}_{n}" for m in MODALITIES for n in FIRST_ORDER + TEXTURE) + GLOBAL
MANIFEST_PATH = Path(__file__).with_name("feature_manifest.json")


def load_manifest(path=MANIFEST_PATH) -> tuple[str, ...]:
    names = tuple(json.loads(Path(path).read_text())["features"])
    if names != FEATURE_NAMES:
        raise MalformedHeader(f"{path}: feature manifest does not match this version of the code")
    return names


def manifest_json() -> str:
    return json.dumps({"version": 1, "n_features": len(FEATURE_NAMES), "features": list(FEATURE_NAMES)}, indent=1) + "\n"


# --- texture ---------------------------------------------------------------------------

def quantize(values: np.ndarray, n_levels: int = N_LEVELS) -> np.ndarray:
    """Uniform bins between the min and max of ``values``; levels 0..n_levels-1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot quantize an empty region")
    lo, hi = v.min(), v.max()
    lv = np.floor(n_levels * (v - lo) / (hi - lo + _BIN_EPS)).astype(np.int64)
    return np.clip(lv, 0, n_levels - 1)


def glcm_3d(levels: np.ndarray, mask: np.ndarray, n_levels: int = N_LEVELS) -> np.ndarray:
    """Symmetric co-occurrence matrix over the 13 directions, normalized to sum 1."""
    if n_levels < 2:
        raise ValueError("need at least two gray levels")
    if levels.shape != mask.shape:
        raise ShapeMismatch(f"levels {levels.shape} vs mask {mask.shape}")
    pad = np.pad(mask, 1)
    lv = np.pad(np.where(mask, levels, 0), 1)
    core = tuple(slice(1, 1 + s) for s in mask.shape)
    counts = np.zeros(n_levels * n_levels, dtype=np.int64)
    for d in DIRECTIONS:
        shifted = tuple(slice(1 + o, 1 + o + s) for o, s in zip(d, mask.shape))
        both = pad[core] & pad[shifted]
        if both.any():
            counts += np.bincount(lv[core][both] * n_levels + lv[shifted][both], minlength=n_levels * n_levels)
    m = counts.reshape(n_levels, n_levels)
    m = m + m.T
    total = m.sum()
    if total == 0:
        raise NoValidPairs("region has no neighbouring voxel pairs")
    return m / total


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def haralick(p: np.ndarray) -> dict[str, float]:
    """The 15 texture statistics of a normalized GLCM; gray levels are numbered from 1."""
    ng = p.shape[0]
    i = np.arange(1, ng + 1, dtype=np.float64)
    ii, jj = np.meshgrid(i, i, indexing="ij")
    px, py = p.sum(axis=1), p.sum(axis=0)
    mux, muy = float(i @ px), float(i @ py)
    sdx = np.sqrt(float(((i - mux) ** 2) @ px))
    sdy = np.sqrt(float(((i - muy) ** 2) @ py))
    autocorr = float((ii * jj * p).sum())
    corr = (autocorr - mux * muy) / (sdx * sdy) if sdx * sdy > 1e-12 else 0.0

    k_sum = np.arange(2, 2 * ng + 1, dtype=np.float64)
    p_sum = np.bincount((ii + jj).astype(np.int64).ravel() - 2, weights=p.ravel(), minlength=2 * ng - 1)
    k_diff = np.arange(ng, dtype=np.float64)
    p_diff = np.bincount(np.abs(ii - jj).astype(np.int64).ravel(), weights=p.ravel(), minlength=ng)
    sum_avg = float(k_sum @ p_sum)
    diff_avg = float(k_diff @ p_diff)

    hxy = _entropy(p)
    hx, hy = _entropy(px), _entropy(py)
    outer = np.outer(px, py)
    nz = p > 0
    hxy1 = float(-(p[nz] * np.log2(outer[nz])).sum())
    onz = outer > 0
    hxy2 = float(-(outer[onz] * np.log2(outer[onz])).sum())
    hmax = max(hx, hy)
    imc1 = (hxy - hxy1) / hmax if hmax > 0 else 0.0
    imc2 = float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - hxy)))))

    return {
        "energy": float((p * p).sum()),
        "contrast": float((((ii - jj) ** 2) * p).sum()),
        "correlation": float(corr),
        "variance": float((((ii - mux) ** 2) * p).sum()),
        "homogeneity": float((p / (1.0 + (ii - jj) ** 2)).sum()),
        "sum_average": sum_avg,
        "sum_variance": float(((k_sum - sum_avg) ** 2) @ p_sum),
        "sum_entropy": _entropy(p_sum),
        "entropy": hxy,
        "difference_variance": float(((k_diff - diff_avg) ** 2) @ p_diff),
        "difference_entropy": _entropy(p_diff),
        "imc1": float(imc1),
        "imc2": imc2,
        "autocorrelation": autocorr,
        "dissimilarity": float((np.abs(ii - jj) * p).sum()),
    }


def constant_glcm(n_levels: int = N_LEVELS) -> np.ndarray:
    p = np.zeros((n_levels, n_levels))
    p[0, 0] = 1.0
    return p


def texture_features(values: np.ndarray, mask: np.ndarray, n_levels: int = N_LEVELS) -> dict[str, float]:
    """Texture of ``values`` inside ``mask``; single-voxel regions get the constant-region values."""
    levels = np.zeros(mask.shape, dtype=np.int64)
    levels[mask] = quantize(values[mask], n_levels)
    try:
        p = glcm_3d(levels, mask, n_levels)
    except NoValidPairs:
        p = constant_glcm(n_levels)
    return haralick(p)


# --- first order and shape -------------------------------------------------------------

def first_order(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    mean = v.mean()
    c = v - mean
    m2, m3, m4 = (c * c).mean(), (c**3).mean(), (c**4).mean()
    degenerate = v.max() == v.min() or m2 == 0
    return {
        "mean": float(mean),
        "std": 0.0 if degenerate else float(np.sqrt(m2)),
        "min": float(v.min()),
        "max": float(v.max()),
        "skewness": 0.0 if degenerate else float(m3 / m2**1.5),
        "kurtosis": 0.0 if degenerate else float(m4 / (m2 * m2)),
    }


def exposed_area_mm2(mask: np.ndarray, spacing: Sequence[float]) -> float:
    """Total area of voxel faces separating the mask from the outside."""
    pad = np.pad(mask, 1)
    sx, sy, sz = spacing
    face = (sy * sz, sx * sz, sx * sy)
    area = 0.0
    for axis in range(3):
        flips = np.count_nonzero(np.diff(pad.astype(np.int8), axis=axis))
        area += flips * face[axis]
    return area


def extract_features(bundle: CaseBundle, finding: Finding, mask: LesionMask, n_levels: int = N_LEVELS) -> np.ndarray:
    """The 87-entry vector in manifest order for one lesion.

    All four channels must share the mask's grid (the reference frame).
    """
    m = np.asarray(mask.mask, dtype=bool)
    if not m.any():
        raise ValueError(f"empty lesion mask for {finding.key}")
    ref = bundle.channels["T2"]
    out: dict[str, float] = {}
    means = {}
    for mod in MODALITIES:
        vol = bundle.channels[mod]
        if vol.dims != m.shape or not vol.same_geometry(ref):
            raise ShapeMismatch(f"{finding.case_id}/{finding.finding_id}: {mod} is not on the reference grid")
        data = np.asarray(vol.data, dtype=np.float64)
        vals = data[m]
        fo = first_order(vals)
        means[mod] = fo["mean"]
        for k, v in fo.items():
            out[f"{mod}_{k}"] = v
        for k, v in texture_features(data, m, n_levels).items():
            out[f"{mod}_{k}"] = v
    n_vox = int(m.sum())
    volume = n_vox * float(np.prod(ref.spacing))
    out["lesion_volume_mm3"] = volume
    out["surface_to_volume"] = exposed_area_mm2(m, ref.spacing) / volume
    out["adc_t2_ratio"] = means["ADC"] / means["T2"] if means["T2"] != 0 else 0.0
    vec = np.array([out[n] for n in FEATURE_NAMES], dtype=np.float64)
    return np.where(np.isfinite(vec), vec, 0.0)


# --- feature table ---------------------------------------------------------------------

def write_feature_table(keys: Sequence[tuple[str, int]], labels: Sequence[Optional[int]],
                        matrix: np.ndarray, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(keys), len(FEATURE_NAMES)):
        raise FeatureCountMismatch(f"feature matrix {matrix.shape}, expected ({len(keys)}, {len(FEATURE_NAMES)})")
    lines = [",".join(("case_id", "finding_id", "label") + FEATURE_NAMES)]
    for (case, fid), y, row in zip(keys, labels, matrix):
        lines.append(",".join([case, str(fid), "" if y is None else str(int(y))] + [repr(float(v)) for v in row]))
    write_bytes_if_changed(path, ("\n".join(lines) + "\n").encode())


def read_feature_table(path) -> tuple[list, list, np.ndarray]:
    """(keys, labels, matrix); the header must list the manifest names in order."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][3:]) != FEATURE_NAMES or rows[0][:3] != ["case_id", "finding_id", "label"]:
        raise MalformedHeader(f"{path}: header does not match the feature manifest")
    keys, labels, mat = [], [], []
    for r in rows[1:]:
        if len(r) != 3 + len(FEATURE_NAMES):
            raise FeatureCountMismatch(f"{path}: row for {r[:2]} has {len(r) - 3} features")
        keys.append((r[0], int(r[1])))
        labels.append(None if r[2] == "" else int(r[2]))
        mat.append([float(v) for v in r[3:]])
    return keys, labels, np.array(mat, dtype=np.float64).reshape(len(keys), len(FEATURE_NAMES))


def feature_matrix(items: Iterable[tuple[CaseBundle, Finding, LesionMask]], n_levels: int = N_LEVELS) -> np.ndarray:
    rows = [extract_features(b, f, m, n_levels) for b, f, m in items]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
