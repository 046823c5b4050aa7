"""
Tensor container and tensor bundles.

Container layout: magic ``MTOK1``, u8 rank, rank × u32 little-endian dims,
then the row-major IEEE-754 float32 little-endian payload.

A bundle is a directory holding ``manifest.json`` plus one container per
tensor; the manifest names each tensor's role, file and shape and carries
free-form metadata (architecture descriptors, configs).
"""

import json
import struct
from pathlib import Path

import numpy as np

from logging_config import get_logger
from quadtok.errors import FormatError

logger = get_logger(__name__)

MAGIC = b"MTOK1"
MANIFEST_NAME = "manifest.json"
BUNDLE_SCHEMA_VERSION = 1

_LE_F32 = np.dtype("<f4")


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds container limit", field="rank")
    if any(dim > 0xFFFFFFFF for dim in array.shape):
        raise FormatError("dimension exceeds u32", field="dims")
    header = MAGIC + struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype=_LE_F32).tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    """Decode a container into a float32 array."""
    if payload[:len(MAGIC)] != MAGIC:
        raise FormatError("bad tensor container magic", field="magic")
    offset = len(MAGIC)
    if len(payload) < offset + 1:
        raise FormatError("missing rank byte", field="rank")
    rank = payload[offset]
    offset += 1
    if len(payload) < offset + 4 * rank:
        raise FormatError("truncated dimension list", field="dims")
    dims = struct.unpack_from(f"<{rank}I", payload, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) - offset != 4 * count:
        raise FormatError(f"payload holds {len(payload) - offset} bytes, expected {4 * count}", field="payload")
    data = np.frombuffer(payload, dtype=_LE_F32, count=count, offset=offset)
    return data.astype(np.float32).reshape(dims)


def save_tensor(array, path) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_tensor(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}", field=e.field) from e


# ========================
# Bundles
# ========================
def save_bundle(directory, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    """Write each tensor to ``<role>.mtok`` and a manifest describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for role, array in tensors.items():
        filename = f"{role}.mtok"
        save_tensor(array, directory / filename)
        entries.append({"role": role, "file": filename, "shape": list(np.shape(array))})
    manifest = {"schema_version": BUNDLE_SCHEMA_VERSION, "tensors": entries, "metadata": metadata or {}}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.debug("Saved tensor bundle", extra={"extra_fields": {"directory": str(directory), "tensors": len(entries)}})
    return directory


def load_bundle(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors by role, metadata); shapes are checked against the manifest."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}", field="manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable bundle manifest: {e}", field="manifest") from e
    if manifest.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {manifest.get('schema_version')!r}", field="schema_version")

    tensors = {}
    for entry in manifest.get("tensors", []):
        try:
            role, filename, shape = entry["role"], entry["file"], tuple(entry["shape"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed tensor entry {entry!r}", field="tensors") from e
        array = load_tensor(directory / filename)
        if array.shape != shape:
            raise FormatError(f"tensor {role!r} has shape {array.shape}, manifest says {shape}", field="shape")
        tensors[role] = array
    return tensors, manifest.get("metadata", {})
