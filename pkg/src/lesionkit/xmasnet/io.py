"""Model files: JSON manifest plus a raw little-endian float32 payload."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ChecksumMismatch, MalformedHeader, ShapeMismatch, VersionMismatch
from ..volgrid import write_bytes_if_changed
from .network import NetworkConfig, XmasNet

FORMAT_VERSION = 1


def _payload_path(manifest_path: Path) -> Path:
    name = manifest_path.name
    stem = name[: -len(".json")] if name.endswith(".json") else name
    return manifest_path.with_name(stem + ".f32")


def save_model(net: XmasNet, path) -> Path:
    """Write ``<name>.json`` and ``<name>.f32``; returns the manifest path."""
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in net.state().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    payload_path = _payload_path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": net.config.to_dict(),
        "dtype": "f32le",
        "data_file": payload_path.name,
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    write_bytes_if_changed(payload_path, payload)
    write_bytes_if_changed(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_model(path) -> XmasNet:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise MalformedHeader(f"{path}: cannot read model manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        cfg = NetworkConfig(**manifest["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: bad architecture block ({exc})") from exc
    payload_path = path.with_name(manifest.get("data_file", _payload_path(path).name))
    payload = payload_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise ChecksumMismatch(f"{payload_path}: payload checksum does not match the manifest")
    net = XmasNet(cfg)
    expected = net.state()
    table = {t["name"]: t for t in manifest["tensors"]}
    if set(table) != set(expected):
        raise ShapeMismatch(f"{path}: tensor names differ from the architecture")
    state = {}
    for name, ref in expected.items():
        entry = table[name]
        if tuple(entry["shape"]) != ref.shape:
            raise ShapeMismatch(f"{path}: tensor {name} has shape {entry['shape']}, architecture needs {list(ref.shape)}")
        n = int(np.prod(ref.shape))
        start = entry["offset"]
        if start < 0 or start + 4 * n > len(payload):
            raise ShapeMismatch(f"{path}: tensor {name} runs past the payload")
        state[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=start).reshape(ref.shape)
    net.load_state(state)
    return net
