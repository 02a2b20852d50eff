"""
Binary container for traces, transformed data and coefficient fields.

Layout: magic b"CVXF", little-endian uint64 header length, UTF-8 JSON header,
then every array as little-endian float64 in C order, in header order.
The header carries no timestamps, so identical inputs give identical bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from apps.core.exceptions import DataError

logger = logging.getLogger(__name__)

MAGIC = b"CVXF"
FORMAT_VERSION = 1
STAGES = ("raw", "noisy", "transformed", "coefficients", "checkpoint", "reconstruction")


def write_container(path: Union[str, Path], stage: str, arrays: Dict[str, np.ndarray],
                    metadata: Dict[str, Any] = None) -> Path:
    """
    Write arrays and metadata to a container file.

    Args:
        path: Output file
        stage: One of STAGES
        arrays: Named arrays (converted to float64)
        metadata: JSON-serialisable header fields

    Returns:
        Path written
    """
    if stage not in STAGES:
        raise DataError(f"Unknown container stage: {stage}")
    prepared = {name: np.ascontiguousarray(values, dtype="<f8") for name, values in arrays.items()}
    header = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "arrays": [{"name": name, "shape": list(values.shape)} for name, values in prepared.items()],
        "metadata": metadata or {},
    }
    encoded = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        for values in prepared.values():
            handle.write(values.tobytes(order="C"))
    logger.debug(f"Wrote {stage} container {path} ({len(prepared)} arrays)")
    return path


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a container file.

    Returns:
        (header, arrays)

    Raises:
        DataError: on a missing file, bad magic or truncated payload
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Container not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"Not a container file: {path}")
    (length,) = struct.unpack("<Q", blob[4:12])
    try:
        header = json.loads(blob[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"Corrupt container header in {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"Unsupported container version {header.get('format_version')} in {path}")

    arrays: Dict[str, np.ndarray] = {}
    offset = 12 + length
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise DataError(f"Truncated container {path}: array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    return header, arrays


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
