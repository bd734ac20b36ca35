"""Checkpoint files: a text manifest plus a raw little-endian float64 payload.

Manifest layout (``manifest.txt``)::

    glpe-checkpoint 1
    @policy_kind=centralized_glpe
    param<TAB>name<TAB>d0,d1<TAB>byte_offset

``@key=value`` lines carry metadata. Each ``param`` line names one array
stored contiguously (row-major) at ``byte_offset`` in ``params.bin``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

MAGIC = "glpe-checkpoint 1"
MANIFEST = "manifest.txt"
PAYLOAD = "params.bin"
_DTYPE = np.dtype("<f8")


class ManifestError(ValueError):
    """Raised for unreadable or incompatible checkpoints."""


def save_checkpoint(directory, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"bad metadata entry {key!r}")
        lines.append(f"@{key}={value}")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(c in name for c in "\t\n"):
            raise ValueError(f"bad parameter name {name!r}")
        arr = np.asarray(arr, dtype=_DTYPE, order="C")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param\t{name}\t{shape}\t{offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (directory / PAYLOAD).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    directory = Path(directory)
    try:
        text = (directory / MANIFEST).read_text()
        payload = (directory / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise ManifestError(f"checkpoint incomplete: {exc.filename}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ManifestError(f"{directory / MANIFEST}: not a checkpoint manifest")
    meta: Dict[str, str] = {}
    arrays: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("@"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[0] != "param":
            raise ManifestError(f"manifest line {lineno}: malformed entry")
        _, name, shape_txt, offset_txt = parts
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        offset = int(offset_txt)
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * _DTYPE.itemsize
        if end > len(payload):
            raise ManifestError(f"manifest line {lineno}: {name} runs past the payload")
        arrays[name] = np.frombuffer(payload[offset:end], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return meta, arrays
