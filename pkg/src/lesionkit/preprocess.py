"""Lesion-center refinement on DWI and case-level stratified splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyRegion, SeedOutOfBounds, TooFewCases
from .volgrid import Finding, Volume, index_to_world, world_to_index, write_bytes_if_changed

CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class LesionMask:
    """Boolean voxel mask on a volume grid, plus the seed voxel it grew from."""

    mask: np.ndarray
    seed_index: tuple[int, int, int]
    source_modality: str = "DWI"

    @property
    def volume_dims(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)

    @property
    def voxels(self) -> np.ndarray:
        """Sorted (n, 3) integer indices of the mask voxels."""
        return np.argwhere(self.mask)

    def __len__(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SplitPlan:
    train_case_ids: tuple[str, ...]
    val_case_ids: tuple[str, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train_case_ids": list(self.train_case_ids),
                           "val_case_ids": list(self.val_case_ids)}, indent=2) + "\n"

    def save(self, path) -> None:
        write_bytes_if_changed(path, self.to_json().encode())

    @classmethod
    def load(cls, path) -> "SplitPlan":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["train_case_ids"]), tuple(d["val_case_ids"]), int(d["seed"]))


def seed_voxel(vol: Volume, p) -> tuple[int, int, int]:
    idx = np.round(world_to_index(vol, p)).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.asarray(vol.dims)):
        raise SeedOutOfBounds(f"seed {tuple(p)} maps to voxel {tuple(idx)} outside dims {vol.dims}")
    return tuple(int(i) for i in idx)


def _distance_mm(vol: Volume, seed: tuple[int, int, int]) -> np.ndarray:
    # Orthonormal direction: world distance only depends on spacing-scaled index offsets.
    grids = np.ogrid[tuple(slice(0, n) for n in vol.dims)]
    sq = sum(((g - s) * sp) ** 2 for g, s, sp in zip(grids, seed, vol.spacing))
    return np.sqrt(sq)


def region_grow(vol: Volume, seed_world, rel_threshold: float = 0.5,
                max_radius_mm: float = 15.0) -> LesionMask:
    """26-connected flood fill from the seed voxel.

    A voxel is admitted when its intensity is at least ``rel_threshold`` times the
    seed intensity and its center lies within ``max_radius_mm`` of the seed voxel
    center. A non-positive seed intensity admits nothing.
    """
    if not 0 < rel_threshold <= 1:
        raise ValueError("rel_threshold must lie in (0, 1]")
    seed = seed_voxel(vol, seed_world)
    data = vol.data.astype(np.float64)
    seed_value = data[seed]
    if not seed_value > 0:
        raise EmptyRegion(f"seed voxel {seed} has non-positive intensity {seed_value}")
    candidate = (data >= rel_threshold * seed_value) & (_distance_mm(vol, seed) <= max_radius_mm)
    labels, _ = ndimage.label(candidate, structure=CONN26)
    return LesionMask(labels == labels[seed], seed)


def _component_near_seed(mask: np.ndarray, seed: tuple[int, int, int]) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=CONN26)
    if n == 0:
        raise EmptyRegion("mask is empty")
    if labels[seed]:
        return labels == labels[seed]
    pts = np.argwhere(labels > 0)
    d2 = ((pts - np.asarray(seed)) ** 2).sum(axis=1)
    # argmin takes the first (lowest index) voxel among equidistant ones
    nearest = pts[np.argmin(d2)]
    return labels == labels[tuple(nearest)]


def morph_close_open(mask: LesionMask, radius_vox: int = 1) -> LesionMask:
    """Binary closing then opening with a cubic structuring element.

    Keeps the connected component containing the seed, or the nearest one.
    """
    if radius_vox < 0:
        raise ValueError("radius_vox must be non-negative")
    m = mask.mask
    if radius_vox > 0:
        se = np.ones((2 * radius_vox + 1,) * 3, dtype=bool)
        pad = 2 * radius_vox
        padded = np.pad(m, pad)
        closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
        closed = closed[(slice(pad, -pad),) * 3]
        # opening inside the volume: outside voxels count as background
        m = ndimage.binary_dilation(ndimage.binary_erosion(closed, se, border_value=0), se)
    if not m.any():
        raise EmptyRegion("morphological opening removed every voxel")
    return LesionMask(_component_near_seed(m, mask.seed_index), mask.seed_index, mask.source_modality)


def mask_centroid_world(vol: Volume, mask: LesionMask) -> np.ndarray:
    return index_to_world(vol, mask.voxels.astype(np.float64)).mean(axis=0)


def lesion_mask(dwi: Volume, pos_world, rel_threshold: float = 0.5, max_radius_mm: float = 15.0,
                radius_vox: int = 1) -> LesionMask:
    return morph_close_open(region_grow(dwi, pos_world, rel_threshold, max_radius_mm), radius_vox)


def refine_lesion_center(dwi: Volume, finding: Finding, rel_threshold: float = 0.5,
                         max_radius_mm: float = 15.0, radius_vox: int = 1) -> tuple[float, float, float]:
    """Centroid of the grown and cleaned lesion region; the original position on failure."""
    try:
        mask = lesion_mask(dwi, finding.pos_world, rel_threshold, max_radius_mm, radius_vox)
    except (EmptyRegion, SeedOutOfBounds):
        return finding.pos_world
    return tuple(float(v) for v in mask_centroid_world(dwi, mask))


def ball_mask(vol: Volume, center_world, radius_mm: float = 5.0) -> LesionMask:
    """Fallback lesion region: voxels whose centers lie within ``radius_mm``."""
    idx = np.indices(vol.dims).reshape(3, -1).T
    d = np.linalg.norm(index_to_world(vol, idx) - np.asarray(center_world, dtype=float), axis=1)
    m = (d <= radius_mm).reshape(vol.dims)
    seed = tuple(int(i) for i in np.clip(np.round(world_to_index(vol, center_world)), 0, np.asarray(vol.dims) - 1))
    if not m.any():
        m[seed] = True
    return LesionMask(m, seed)


def _largest_remainder(sizes: Sequence[int], fraction: float) -> list[int]:
    total = int(round(sum(sizes) * fraction))
    quotas = [n * fraction for n in sizes]
    alloc = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def stratified_split(findings: Iterable[Finding], val_fraction: float, seed: int) -> SplitPlan:
    """Case-level split stratified on whether a case holds a significant finding.

    Per-stratum validation counts are the nearest-integer quotas, adjusted by the
    largest-remainder rule so the total equals round(n_cases * val_fraction).
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    positive: dict[str, bool] = {}
    for f in findings:
        if f.label is None:
            raise ValueError(f"finding {f.key} is unlabeled")
        positive[f.case_id] = positive.get(f.case_id, False) or f.label == 1
    strata = [sorted(c for c, p in positive.items() if p is flag) for flag in (False, True)]
    strata = [s for s in strata if s]
    for s in strata:
        if len(s) < 2:
            raise TooFewCases(f"stratum with cases {s} has fewer than 2 cases")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cases, n_val in zip(strata, _largest_remainder([len(s) for s in strata], val_fraction)):
        order = rng.permutation(len(cases))
        val.extend(cases[i] for i in order[:n_val])
        train.extend(cases[i] for i in order[n_val:])
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), int(seed))


def read_exclusions(path) -> set[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return {ln.strip() for ln in lines if ln.strip()}
