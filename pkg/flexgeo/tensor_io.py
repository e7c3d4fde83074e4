# input:  [Binary file handles, numpy little-endian dtypes, JSON header dictionaries]
# output: [Versioned container framing (magic, version, JSON header) plus named array records with dims, dtype code, and little-endian payloads]
# pos:    [Shared wire codec underneath the TileFile format and model checkpoints]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

import json
from typing import Any, BinaryIO, Iterable

import numpy as np

from errors import FlexGeoError

DTYPE_CODES = {
    "f8": np.dtype("<f8"),
    "f4": np.dtype("<f4"),
    "i8": np.dtype("<i8"),
}
MAX_RANK = 8


class ContainerFormatError(FlexGeoError):
    pass


def _read_exact(handle: BinaryIO, size: int, what: str) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise ContainerFormatError("CONTAINER_TRUNCATED", f"File ended while reading {what}.")
    return data


def write_container_header(handle: BinaryIO, magic: bytes, version: int, header: dict[str, Any]) -> None:
    payload = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    handle.write(magic)
    handle.write(np.array([version, len(payload)], dtype="<u4").tobytes())
    handle.write(payload)


def read_container_header(handle: BinaryIO, magic: bytes, supported_version: int) -> dict[str, Any]:
    found = handle.read(len(magic))
    if found != magic:
        raise ContainerFormatError("CONTAINER_MAGIC_INVALID", f"Expected magic {magic!r}, found {found!r}.")
    version, length = np.frombuffer(_read_exact(handle, 8, "header size"), dtype="<u4")
    if int(version) != supported_version:
        raise ContainerFormatError(
            "CONTAINER_VERSION_UNSUPPORTED",
            f"Container version {int(version)} is not supported (expected {supported_version}).",
        )
    try:
        header = json.loads(_read_exact(handle, int(length), "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError("CONTAINER_HEADER_INVALID", "Container header is not valid JSON.") from exc
    if not isinstance(header, dict):
        raise ContainerFormatError("CONTAINER_HEADER_INVALID", "Container header must be a JSON object.")
    return header


def write_records(handle: BinaryIO, records: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(records)
    handle.write(np.array([len(items)], dtype="<u4").tobytes())
    for name, array in items:
        code = next((key for key, dtype in DTYPE_CODES.items() if dtype == np.dtype(array.dtype).newbyteorder("<")), None)
        if code is None:
            raise ContainerFormatError("CONTAINER_DTYPE_UNSUPPORTED", f"Record '{name}' has unsupported dtype {array.dtype}.")
        encoded_name = name.encode("utf-8")
        handle.write(np.array([len(encoded_name)], dtype="<u2").tobytes())
        handle.write(encoded_name)
        handle.write(code.encode("ascii"))
        handle.write(np.array([array.ndim], dtype="<u1").tobytes())
        handle.write(np.array(array.shape, dtype="<u4").tobytes())
        handle.write(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())


def read_records(handle: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = np.frombuffer(_read_exact(handle, 4, "record count"), dtype="<u4")
    records: dict[str, np.ndarray] = {}
    for _ in range(int(count)):
        (name_length,) = np.frombuffer(_read_exact(handle, 2, "record name length"), dtype="<u2")
        name = _read_exact(handle, int(name_length), "record name").decode("utf-8")
        code = _read_exact(handle, 2, "dtype code").decode("ascii")
        if code not in DTYPE_CODES:
            raise ContainerFormatError("CONTAINER_DTYPE_UNSUPPORTED", f"Record '{name}' has unknown dtype code {code!r}.")
        (rank,) = np.frombuffer(_read_exact(handle, 1, "record rank"), dtype="<u1")
        if int(rank) > MAX_RANK:
            raise ContainerFormatError("CONTAINER_RANK_INVALID", f"Record '{name}' declares rank {int(rank)}.")
        shape = tuple(int(dim) for dim in np.frombuffer(_read_exact(handle, 4 * int(rank), "record dims"), dtype="<u4"))
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = np.frombuffer(_read_exact(handle, size, f"record '{name}'"), dtype=dtype)
        records[name] = payload.reshape(shape).copy()
    return records
