"""Multi-view slicing augmentation: 32x32 three-channel patches around each lesion.

Each view is a planar 32x32 grid at 1 mm pitch, oriented by one of seven slicing
bases, rotated in-plane, sheared and translated by up to one pixel. Sample tensors
are channel-major, shape (3, 32, 32); rows follow the in-plane v axis and columns
the u axis, and pixel (16, 16) sits exactly on the lesion center.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from itertools import product
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import MalformedHeader, MissingModality
from .volgrid import CaseBundle, Finding, Volume, sample_points, write_bytes_if_changed

PATCH = 32
N_ORIENTATIONS = 7
DEFAULT_SHEAR = 0.1

MODALITY_CODES = {"D": "DWI", "A": "ADC", "K": "KTRANS", "T": "T2"}


@dataclass(frozen=True)
class ChannelSet:
    code: str

    def __post_init__(self):
        if len(self.code) != 3 or len(set(self.code)) != 3 or any(c not in MODALITY_CODES for c in self.code):
            raise ValueError(f"invalid channel set code {self.code!r}")

    @property
    def modalities(self) -> tuple[str, str, str]:
        return tuple(MODALITY_CODES[c] for c in self.code)


CHANNEL_SETS = {c: ChannelSet(c) for c in ("DAK", "DAT", "AKT", "DKT")}


@dataclass(frozen=True)
class ViewSpec:
    orientation_id: int
    inplane_rotation_deg: float = 0.0
    shear: float = 0.0
    translation_vox: tuple[int, int] = (0, 0)
    mirror: bool = False

    def __post_init__(self):
        if not 0 <= self.orientation_id < N_ORIENTATIONS:
            raise ValueError(f"orientation_id must be in 0..6, got {self.orientation_id}")
        if len(self.translation_vox) != 2 or any(t not in (-1, 0, 1) for t in self.translation_vox):
            raise ValueError(f"translation components must be in {{-1, 0, 1}}, got {self.translation_vox}")
        object.__setattr__(self, "translation_vox", tuple(int(t) for t in self.translation_vox))


@dataclass(frozen=True, eq=False)
class SampleTensor:
    data: np.ndarray  # (3, 32, 32) float32
    label: Optional[int]
    case_id: str
    finding_id: int
    view: ViewSpec
    channels: ChannelSet


def _rx(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


_BASES = (
    np.eye(3),                                                   # axial: u=x, v=y
    np.array([[0.0, 0, 1], [1, 0, 0], [0, 1, 0]]),               # sagittal: u=y, v=z
    np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]]),              # coronal: u=x, v=z
    _rx(45.0), _rx(-45.0), _ry(45.0), _ry(-45.0),                # oblique axial tilts
)


def orientation_basis(orientation_id: int) -> np.ndarray:
    """Rotation whose columns map in-plane (u, v, normal) to world axes."""
    if not 0 <= orientation_id < N_ORIENTATIONS:
        raise ValueError(f"orientation_id must be in 0..6, got {orientation_id}")
    return _BASES[orientation_id].copy()


def enumerate_views(rotations_per_orientation: int = 4, shears: int = 3,
                    seed: Optional[int] = None, max_shear: float = DEFAULT_SHEAR,
                    translate: bool = True) -> list[ViewSpec]:
    """Cartesian product orientation x rotation x shear x translation.

    Translations are the nine one-pixel offsets, or only the centred one when
    ``translate`` is false.

    With ``seed`` set, rotation angles are drawn uniformly from [0, 360) and shear
    coefficients from [-max_shear, max_shear] per orientation instead of the
    regular grids.
    """
    if rotations_per_orientation < 1 or shears < 1:
        raise ValueError("rotation and shear counts must be >= 1")
    rng = np.random.default_rng(seed) if seed is not None else None
    translations = list(product((-1, 0, 1), repeat=2)) if translate else [(0, 0)]
    views = []
    for o in range(N_ORIENTATIONS):
        if rng is None:
            angles = [360.0 * k / rotations_per_orientation for k in range(rotations_per_orientation)]
            coeffs = list(np.linspace(-max_shear, max_shear, shears)) if shears > 1 else [0.0]
        else:
            angles = list(rng.uniform(0.0, 360.0, rotations_per_orientation))
            coeffs = list(rng.uniform(-max_shear, max_shear, shears))
        for a, s, t in product(angles, coeffs, translations):
            views.append(ViewSpec(o, float(a), float(s), t))
    return views


_grid = np.arange(PATCH, dtype=np.float64) - PATCH // 2
_V, _U = np.meshgrid(_grid, _grid, indexing="ij")


def view_points(center_world, view: ViewSpec) -> np.ndarray:
    """World coordinates (32, 32, 3) of the patch pixels for one view."""
    shear = np.array([[1.0, view.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = orientation_basis(view.orientation_id) @ _rz(view.inplane_rotation_deg) @ shear
    dx, dy = view.translation_vox
    plane = np.stack([_U + dx, _V + dy, np.zeros_like(_U)], axis=-1)
    return plane @ m.T + np.asarray(center_world, dtype=np.float64)


def intensity_window(vol: Volume, bbox: Optional[tuple[Sequence[int], Sequence[int]]] = None,
                     lo_pct: float = 1.0, hi_pct: float = 99.0) -> tuple[float, float]:
    """Robust (low, high) intensity window over an index bounding box (whole volume by default)."""
    data = vol.data
    if bbox is not None:
        (i0, j0, k0), (i1, j1, k1) = bbox
        data = data[i0:i1, j0:j1, k0:k1]
    lo, hi = np.percentile(data.astype(np.float64), [lo_pct, hi_pct])
    return float(lo), float(hi)


def case_windows(bundle: CaseBundle, bbox=None) -> dict[str, tuple[float, float]]:
    return {m: intensity_window(v, bbox) for m, v in sorted(bundle.channels.items())}


def normalize(values: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    if hi <= lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def extract_modalities(bundle: CaseBundle, center_world, views: Sequence[ViewSpec], modalities: Sequence[str],
                       windows: Optional[Mapping[str, tuple[float, float]]] = None) -> np.ndarray:
    """Normalized patches of any modality list, shape (len(views), len(modalities), 32, 32)."""
    missing = [m for m in modalities if m not in bundle.channels]
    if missing:
        raise MissingModality(f"case {bundle.case_id}: missing {missing}")
    if windows is None:
        windows = {m: intensity_window(bundle.channels[m]) for m in modalities}
    pts = np.stack([view_points(center_world, v) for v in views]).reshape(-1, 3)
    out = np.empty((len(views), len(modalities), PATCH, PATCH), dtype=np.float32)
    for c, m in enumerate(modalities):
        vals = normalize(sample_points(bundle.channels[m], pts), windows[m])
        out[:, c] = vals.reshape(len(views), PATCH, PATCH)
    for i, v in enumerate(views):
        if v.mirror:
            out[i] = out[i, :, :, ::-1]
    return out


def extract_views(bundle: CaseBundle, center_world, views: Sequence[ViewSpec], chans: ChannelSet,
                  windows: Optional[Mapping[str, tuple[float, float]]] = None) -> np.ndarray:
    """Patches for many views at once, shape (len(views), 3, 32, 32), float32."""
    try:
        return extract_modalities(bundle, center_world, views, chans.modalities, windows)
    except MissingModality as exc:
        raise MissingModality(f"{exc} for channel set {chans.code}") from None


def extract_slice(bundle: CaseBundle, center_world, view: ViewSpec, chans: ChannelSet,
                  windows=None, finding: Optional[Finding] = None) -> SampleTensor:
    data = extract_views(bundle, center_world, [view], chans, windows)[0]
    return SampleTensor(
        data,
        None if finding is None else finding.label,
        bundle.case_id,
        -1 if finding is None else finding.finding_id,
        view,
        chans,
    )


def mirror(data: np.ndarray) -> np.ndarray:
    """Horizontal flip of one (C, H, W) sample or a batch (N, C, H, W)."""
    return data[..., ::-1].copy()


# --- sample archive -----------------------------------------------------------------


def _payload_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".f32")


def _records(ordered: Sequence[Finding], n_views: int) -> list[dict]:
    sample_bytes = 3 * PATCH * PATCH * 4
    records = []
    for f in ordered:
        for vi in range(n_views):
            records.append({"case_id": f.case_id, "finding_id": f.finding_id, "view_index": vi,
                            "label": f.label, "offset": len(records) * sample_bytes})
    return records


def write_archive(out_path, chans: ChannelSet, views: Sequence[ViewSpec], ordered: Sequence[Finding],
                  payload: Optional[bytes]) -> int:
    """Manifest (and payload unless ``None``) for findings already in key order."""
    out_path = Path(out_path)
    records = _records(ordered, len(views))
    manifest = {
        "channel_set": chans.code,
        "count": len(records),
        "tensor_shape": [PATCH, PATCH, 3],
        "dtype": "f32le",
        "layout": "channel-major",
        "data_file": None if payload is None else _payload_path(out_path).name,
        "views": [asdict(v) for v in views],
        "records": records,
    }
    if payload is not None:
        write_bytes_if_changed(_payload_path(out_path), payload)
    write_bytes_if_changed(out_path, json.dumps(manifest, separators=(",", ":")).encode())
    return len(records)


def build_dataset(bundles: Mapping[str, CaseBundle], findings: Sequence[Finding], views: Sequence[ViewSpec],
                  chans: ChannelSet, out_path=None, metadata_only: bool = False,
                  windows: Optional[Mapping[str, Mapping[str, tuple[float, float]]]] = None) -> int:
    """Extract every (finding, view) sample and write the archive; returns the sample count.

    ``out_path`` names the JSON manifest; the payload goes next to it with a
    ``.f32`` suffix. ``metadata_only`` skips extraction and writes records only
    (and with ``out_path=None`` nothing is written at all).
    """
    counts = build_datasets(bundles, findings, views, [chans],
                            None if out_path is None else [out_path], metadata_only, windows)
    return counts[0]


def build_datasets(bundles: Mapping[str, CaseBundle], findings: Sequence[Finding], views: Sequence[ViewSpec],
                   channel_sets: Sequence[ChannelSet], out_paths=None, metadata_only: bool = False,
                   windows: Optional[Mapping[str, Mapping[str, tuple[float, float]]]] = None) -> list[int]:
    """Several channel-set archives from one pass of patch extraction per modality."""
    ordered = sorted(findings, key=lambda f: f.key)
    n = len(ordered) * len(views)
    if metadata_only:
        if out_paths is not None:
            for chans, path in zip(channel_sets, out_paths):
                write_archive(path, chans, views, ordered, None)
        return [n] * len(channel_sets)
    mods = sorted({m for c in channel_sets for m in c.modalities}, key=lambda m: list(MODALITY_CODES.values()).index(m))
    stacks = {c.code: [] for c in channel_sets}
    for f in ordered:
        try:
            bundle = bundles[f.case_id]
            win = None if windows is None else windows[f.case_id]
            patches = extract_modalities(bundle, f.pos_world, views, mods, win)
        except (KeyError, MissingModality) as exc:
            raise MissingModality(f"finding {f.case_id}/{f.finding_id}: {exc}") from exc
        for c in channel_sets:
            sel = patches[:, [mods.index(m) for m in c.modalities]]
            stacks[c.code].append(sel.astype("<f4").tobytes())
    for chans, path in zip(channel_sets, out_paths or ()):
        write_archive(path, chans, views, ordered, b"".join(stacks[chans.code]))
    return [n] * len(channel_sets)


def read_archive(path) -> tuple[dict, np.ndarray]:
    """Manifest and samples as an (N, 3, 32, 32) float32 array."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("dtype") != "f32le" or manifest.get("tensor_shape") != [PATCH, PATCH, 3]:
        raise MalformedHeader(f"{path}: unsupported archive layout")
    if manifest.get("data_file") is None:
        return manifest, np.empty((0, 3, PATCH, PATCH), dtype=np.float32)
    raw = (path.parent / manifest["data_file"]).read_bytes()
    data = np.frombuffer(raw, dtype="<f4")
    if data.size != manifest["count"] * 3 * PATCH * PATCH:
        raise ValueError(f"{path}: payload size does not match count {manifest['count']}")
    return manifest, data.reshape(-1, 3, PATCH, PATCH).astype(np.float32)
