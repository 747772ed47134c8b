"""Synthetic multi-modality cases with Gaussian-blob lesions of known significance.

Every modality lives on its own grid over the same world box, so the pipeline has
to co-register them. All lesions are bright on DWI. A significant lesion gets an
extra Ktrans enhancement and ADC drop, each ``contrast_gap`` times a base
amount, plus a rough multiplicative T2 texture. The Ktrans map also holds a
bright artery away from the lesions. Per-lesion amplitude jitter
keeps the classes overlapping on any single feature. With ``contrast_gap`` 0
the label has no influence on image content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..volgrid import CaseBundle, Finding, Volume, voxel_centers_world, write_case, write_findings

# modality -> voxel spacing (mm); every grid spans the same world box
GRIDS = {
    "T2": (0.75, 0.75, 2.5),
    "DWI": (2.0, 2.0, 3.0),
    "ADC": (2.0, 2.0, 3.0),
    "KTRANS": (1.5, 1.5, 3.0),
}
# small world offsets of the perfusion grid, so co-registration is not the identity
GRID_SHIFT = {"KTRANS": (0.4, -0.3, 0.5)}

# lesion amplitudes: a base level for every lesion, plus a per-unit-gap term for significant ones
KTRANS_BASE, KTRANS_GAP = 0.25, 0.2
ADC_BASE, ADC_GAP = 0.25, 0.2
T2_DARKENING, T2_TEXTURE = 0.15, 0.05
# an enhancing artery along z near one corner of the Ktrans map, outside the lesion zone;
# it holds the top percentile of the map so lesion peaks are not clipped by windowing
VESSEL_XY_MM, VESSEL_RADIUS_MM, VESSEL_KTRANS = (5.0, 5.0), 3.5, 1.0


@dataclass(frozen=True)
class PhantomSpec:
    n_cases: int = 40
    lesions_per_case: tuple[int, int] = (2, 4)
    significant_fraction: float = 0.5
    contrast_gap: float = 1.0
    noise_sigma: float = 0.04
    extent_mm: float = 48.0
    radius_mm: tuple[float, float] = (3.0, 5.0)
    amplitude_jitter: float = 0.35
    position_jitter_mm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesions_per_case", tuple(self.lesions_per_case))
        object.__setattr__(self, "radius_mm", tuple(self.radius_mm))
        if self.contrast_gap < 0:
            raise ValueError("contrast_gap must be >= 0")
        if not 0 < self.significant_fraction < 1:
            raise ValueError("significant_fraction must lie in (0, 1)")
        lo, hi = self.lesions_per_case
        if not 1 <= lo <= hi:
            raise ValueError("lesions_per_case must be (min, max) with 1 <= min <= max")
        if self.n_cases < 1 or self.noise_sigma < 0 or self.extent_mm < 24:
            raise ValueError("need n_cases >= 1, noise_sigma >= 0 and extent_mm >= 24")
        if not 0 <= self.amplitude_jitter < 1:
            raise ValueError("amplitude_jitter must lie in [0, 1)")


@dataclass
class Lesion:
    center: np.ndarray
    sigma: float
    label: int
    amp: dict = field(default_factory=dict)


def _grid(mod: str, extent: float) -> tuple[tuple[int, int, int], tuple[float, float, float], tuple[float, float, float]]:
    sp = GRIDS[mod]
    dims = tuple(int(round(extent / s)) for s in sp)
    shift = GRID_SHIFT.get(mod, (0.0, 0.0, 0.0))
    origin = tuple(s / 2 + d for s, d in zip(sp, shift))
    return dims, sp, origin


def _smooth_field(rng: np.random.Generator, n_terms: int = 4, wavelength_mm: float = 40.0):
    k = rng.normal(size=(n_terms, 3))
    k *= (2 * np.pi / wavelength_mm) / np.linalg.norm(k, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, n_terms)
    amp = rng.uniform(0.5, 1.0, n_terms) / n_terms

    def f(p):
        return np.cos(p @ k.T + phase) @ amp

    return f


def _place_centers(rng, n, extent, min_sep=11.0, margin=14.0):
    centers = []
    while len(centers) < n:
        for _ in range(1000):
            c = rng.uniform(margin, extent - margin, 3)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                break
        centers.append(c)
    return centers


def _assign_labels(spec: PhantomSpec, counts: list[int]) -> list[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0xA11])
    total = sum(counts)
    n_pos = int(round(total * spec.significant_fraction))
    labels = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(total - n_pos, int)])
    out, i = [], 0
    for c in counts:
        out.append(labels[i:i + c])
        i += c
    return out


def make_case(spec: PhantomSpec, index: int, labels: np.ndarray) -> tuple[CaseBundle, list[Finding]]:
    rng = np.random.default_rng([spec.seed, index])
    case_id = f"case{index:03d}"
    gap = spec.contrast_gap
    background = _smooth_field(rng)
    lesions = []
    for c, y in zip(_place_centers(rng, len(labels), spec.extent_mm), labels):
        j = spec.amplitude_jitter
        amp = {m: float(rng.uniform(1 - j, 1 + j)) for m in ("ADC", "KTRANS", "T2")}
        amp["DWI"] = float(rng.uniform(0.8, 1.2))
        sigma = float(rng.uniform(*spec.radius_mm)) / 1.5
        lesions.append(Lesion(c, sigma, int(y), amp))

    channels = {}
    for mod in ("DWI", "ADC", "KTRANS", "T2"):
        dims, sp, origin = _grid(mod, spec.extent_mm)
        ref = Volume(np.zeros(dims, np.float32), sp, origin)
        pts = voxel_centers_world(ref).reshape(-1, 3)
        field_ = background(pts)
        texture = rng.normal(size=pts.shape[0])
        if mod == "DWI":
            vol = 0.1 + 0.05 * field_
        elif mod == "ADC":
            vol = 1.0 + 0.1 * field_
        elif mod == "KTRANS":
            vessel = np.hypot(pts[:, 0] - VESSEL_XY_MM[0], pts[:, 1] - VESSEL_XY_MM[1]) <= VESSEL_RADIUS_MM
            vol = 0.15 + 0.05 * field_ + VESSEL_KTRANS * vessel
        else:
            vol = 0.6 + 0.1 * field_
        for les in lesions:
            b = np.exp(-((pts - les.center) ** 2).sum(axis=1) / (2 * les.sigma**2))
            a = les.amp[mod]
            sig = gap * les.label
            if mod == "DWI":
                vol = vol + 1.0 * a * b
            elif mod == "ADC":
                vol = vol - (ADC_BASE + ADC_GAP * sig) * a * b
            elif mod == "KTRANS":
                vol = vol + (KTRANS_BASE + KTRANS_GAP * sig) * a * b
            else:
                vol = vol - T2_DARKENING * a * b + T2_TEXTURE * sig * a * b * texture
        vol = vol + spec.noise_sigma * rng.normal(size=pts.shape[0])
        channels[mod] = Volume(vol.reshape(dims, order="F").astype(np.float32), sp, origin)

    findings = []
    for fid, les in enumerate(lesions, start=1):
        pos = les.center + rng.uniform(-1, 1, 3) * spec.position_jitter_mm
        findings.append(Finding(case_id, fid, tuple(float(v) for v in pos), les.label))
    return CaseBundle(case_id, channels, findings), findings


def generate_phantoms(spec: PhantomSpec, out_dir=None) -> tuple[dict[str, CaseBundle], list[Finding]]:
    """All cases and findings; with ``out_dir`` also writes ``cases/<id>/*.nvol.json`` and ``findings.csv``."""
    count_rng = np.random.default_rng([spec.seed, 0xC0])
    lo, hi = spec.lesions_per_case
    counts = [int(c) for c in count_rng.integers(lo, hi + 1, spec.n_cases)]
    bundles, findings = {}, []
    for i, labels in enumerate(_assign_labels(spec, counts)):
        b, f = make_case(spec, i, labels)
        bundles[b.case_id] = b
        findings.extend(f)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for cid, b in bundles.items():
            write_case(b, out_dir / "cases" / cid)
        write_findings(findings, out_dir / "findings.csv")
    return bundles, findings
