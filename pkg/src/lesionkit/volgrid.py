"""Volume geometry, trilinear sampling, resampling and the native ``nvol`` format.

Arrays are held with shape ``(nx, ny, nz)`` so that ``data[i, j, k]`` is the voxel
at index ``(i, j, k)``; on disk the payload is x-fastest (Fortran order).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import LengthMismatch, MalformedHeader, OversizeGrid, UnsupportedDtype

MODALITIES = ("DWI", "ADC", "KTRANS", "T2")
DEFAULT_VOXEL_BUDGET = 512**3

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid placed in world (patient) coordinates, units of mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite values, got {spacing}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be 3 finite values, got {origin}")
        if np.abs(direction.T @ direction - np.eye(3)).max() >= 1e-6:
            raise ValueError("direction matrix is not orthonormal")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        data.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def affine(self) -> np.ndarray:
        """4x4 index -> world matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.direction, other.direction)
        )

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world bounding box of the voxel centers."""
        corners = np.array(
            [[i, j, k] for i in (0, self.dims[0] - 1) for j in (0, self.dims[1] - 1) for k in (0, self.dims[2] - 1)],
            dtype=float,
        )
        w = index_to_world(self, corners)
        return w.min(axis=0), w.max(axis=0)

    def contains_world(self, p: Sequence[float], tol: float = 1e-6) -> bool:
        idx = world_to_index(self, p)
        return bool(np.all(idx >= -0.5 - tol) and np.all(idx <= np.asarray(self.dims) - 0.5 + tol))


@dataclass(frozen=True)
class Finding:
    case_id: str
    finding_id: int
    pos_world: tuple[float, float, float]
    label: Optional[int] = None

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0, 1 or None, got {self.label!r}")
        object.__setattr__(self, "pos_world", tuple(float(v) for v in self.pos_world))

    @property
    def key(self) -> tuple[str, int]:
        return (self.case_id, self.finding_id)


@dataclass
class CaseBundle:
    case_id: str
    channels: dict[str, Volume]
    findings: list[Finding] = field(default_factory=list)

    def check(self) -> None:
        missing = [m for m in MODALITIES if m not in self.channels]
        if missing:
            raise ValueError(f"case {self.case_id}: missing modalities {missing}")
        ids = [f.finding_id for f in self.findings]
        if len(ids) != len(set(ids)):
            raise ValueError(f"case {self.case_id}: duplicate finding ids")
        ref = self.channels["T2"]
        for f in self.findings:
            if not ref.contains_world(f.pos_world):
                raise ValueError(f"case {self.case_id}: finding {f.finding_id} outside T2 bounds")


# --- geometry -------------------------------------------------------------------


def world_to_index(vol: Volume, p) -> np.ndarray:
    """Continuous voxel index of world point(s) ``p`` (shape (3,) or (M, 3))."""
    p = np.asarray(p, dtype=np.float64)
    rel = p - np.asarray(vol.origin)
    # rows of rel times direction == (direction^T rel)^T
    return (rel @ vol.direction) / np.asarray(vol.spacing)


def index_to_world(vol: Volume, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.float64)
    return (idx * np.asarray(vol.spacing)) @ vol.direction.T + np.asarray(vol.origin)


def voxel_centers_world(vol: Volume) -> np.ndarray:
    """World coordinates of every voxel center, shape (nx*ny*nz, 3), x-fastest."""
    nx, ny, nz = vol.dims
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1).astype(np.float64)
    return index_to_world(vol, idx)


# --- sampling ---------------------------------------------------------------------


def sample_index(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``data`` at continuous indices ``idx`` (M, 3).

    Corners falling outside the grid contribute zero.
    """
    idx = np.asarray(idx, dtype=np.float64)
    shape = np.asarray(data.shape)
    r = np.round(idx)
    idx = np.where(np.abs(idx - r) < _SNAP, r, idx)
    base = np.floor(idx)
    frac = idx - base
    base = base.astype(np.int64)
    out = np.zeros(idx.shape[0], dtype=np.float64)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = wx * wy * wz
                c = base + (dx, dy, dz)
                ok = np.all((c >= 0) & (c < shape), axis=1) & (w != 0.0)
                if ok.any():
                    cc = c[ok]
                    out[ok] += w[ok] * data[cc[:, 0], cc[:, 1], cc[:, 2]]
    return out


def sample_points(vol: Volume, points) -> np.ndarray:
    """Trilinear samples of ``vol`` at world points (M, 3); float64 result."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return sample_index(vol.data, world_to_index(vol, points))


def trilinear_sample(vol: Volume, p) -> float:
    return float(sample_points(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def resample_isotropic(vol: Volume, target_spacing: float = 1.0,
                       voxel_budget: int = DEFAULT_VOXEL_BUDGET) -> Volume:
    """Resample onto a ``target_spacing`` isotropic grid sharing origin and direction."""
    if not target_spacing > 0:
        raise ValueError("target_spacing must be positive")
    extent = np.asarray(vol.dims) * np.asarray(vol.spacing)
    dims = tuple(max(1, int(math.ceil(e / target_spacing - 1e-9))) for e in extent)
    if int(np.prod(dims, dtype=np.int64)) > voxel_budget:
        raise OversizeGrid(f"resampled grid {dims} exceeds budget of {voxel_budget} voxels")
    ref = Volume(np.zeros(dims, dtype=np.float32), (target_spacing,) * 3, vol.origin, vol.direction)
    return resample_to_reference(vol, ref)


def resample_to_reference(vol: Volume, ref: Volume) -> Volume:
    """Sample ``vol`` at the voxel centers of ``ref``'s grid."""
    if vol.same_geometry(ref):
        return Volume(vol.data.copy(), ref.spacing, ref.origin, ref.direction)
    values = sample_points(vol, voxel_centers_world(ref))
    data = values.reshape(ref.dims[::-1]).transpose(2, 1, 0)
    return Volume(data.astype(np.float32), ref.spacing, ref.origin, ref.direction)


# --- nvol I/O -----------------------------------------------------------------------


def _payload_path(header_path: Path) -> Path:
    name = header_path.name
    stem = name[: -len(".nvol.json")] if name.endswith(".nvol.json") else header_path.stem
    return header_path.with_name(stem + ".f32")


def write_volume(vol: Volume, path) -> Path:
    """Write ``<name>.nvol.json`` plus its raw payload; returns the header path."""
    path = Path(path)
    payload = _payload_path(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "direction": [float(v) for v in vol.direction.ravel()],
        "dtype": "f32le",
        "data_file": payload.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    write_bytes_if_changed(payload, vol.data.astype("<f4").tobytes(order="F"))
    write_bytes_if_changed(path, (json.dumps(header, indent=2) + "\n").encode("utf-8"))
    return path


def _header_vector(header: dict, key: str, n: int, kind=float) -> list:
    value = header.get(key)
    if not isinstance(value, list) or len(value) != n:
        raise MalformedHeader(f"header key {key!r} must be a list of {n} numbers")
    try:
        out = [kind(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"header key {key!r}: {exc}") from None
    if kind is int and any(o != v for o, v in zip(out, value)):
        raise MalformedHeader(f"header key {key!r} must hold integers")
    if not all(math.isfinite(v) for v in out):
        raise MalformedHeader(f"header key {key!r} holds non-finite values")
    return out


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header must be a JSON object")
    dims = _header_vector(header, "dims", 3, int)
    spacing = _header_vector(header, "spacing_mm", 3)
    origin = _header_vector(header, "origin_mm", 3)
    direction = np.asarray(_header_vector(header, "direction", 9)).reshape(3, 3)
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"{path}: dims must be positive, got {dims}")
    if any(s <= 0 for s in spacing):
        raise MalformedHeader(f"{path}: spacing must be positive, got {spacing}")
    if np.abs(direction.T @ direction - np.eye(3)).max() >= 1e-6:
        raise MalformedHeader(f"{path}: direction is not orthonormal")
    if header.get("dtype") != "f32le":
        raise UnsupportedDtype(f"{path}: dtype {header.get('dtype')!r} is not supported (expected 'f32le')")
    data_file = header.get("data_file")
    if not isinstance(data_file, str) or not data_file:
        raise MalformedHeader(f"{path}: missing data_file")
    raw = (path.parent / data_file).read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != 4 * n:
        raise LengthMismatch(f"{path}: payload holds {len(raw) / 4:g} scalars, header dims need {n}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    if not np.isfinite(data).all():
        raise MalformedHeader(f"{path}: payload contains non-finite values")
    return Volume(data, tuple(spacing), tuple(origin), direction)


def write_bytes_if_changed(path, content: bytes) -> None:
    """Write ``content`` unless the file already holds exactly those bytes."""
    path = Path(path)
    if path.exists() and path.stat().st_size == len(content) and path.read_bytes() == content:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(content)
    os.replace(tmp, path)


# --- findings CSV ---------------------------------------------------------------------

FINDINGS_HEADER = ["case_id", "finding_id", "x_mm", "y_mm", "z_mm", "label"]


def write_findings(findings: Iterable[Finding], path) -> None:
    lines = [",".join(FINDINGS_HEADER)]
    for f in findings:
        label = "" if f.label is None else str(int(f.label))
        lines.append(",".join([f.case_id, str(f.finding_id), *(repr(float(v)) for v in f.pos_world), label]))
    write_bytes_if_changed(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_findings(path) -> list[Finding]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FINDINGS_HEADER:
            raise MalformedHeader(f"{path}: expected header {','.join(FINDINGS_HEADER)}")
        out = []
        for row in reader:
            try:
                label = row["label"].strip()
                out.append(Finding(
                    row["case_id"],
                    int(row["finding_id"]),
                    (float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])),
                    int(label) if label else None,
                ))
            except (TypeError, ValueError) as exc:
                raise MalformedHeader(f"{path}: bad findings row {row}: {exc}") from None
    return out


def read_case(case_dir, findings: Sequence[Finding] = ()) -> CaseBundle:
    case_dir = Path(case_dir)
    channels = {}
    for m in MODALITIES:
        p = case_dir / f"{m}.nvol.json"
        if p.exists():
            channels[m] = read_volume(p)
    return CaseBundle(case_dir.name, channels, [f for f in findings if f.case_id == case_dir.name])


def write_case(bundle: CaseBundle, case_dir) -> None:
    for m, vol in sorted(bundle.channels.items()):
        write_volume(vol, Path(case_dir) / f"{m}.nvol.json")
