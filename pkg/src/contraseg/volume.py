"""Dense 3D volume container with bit-exact file I/O and label utilities.

A :class:`Volume` is a z-major (depth, height, width) grid of one of three
element types:

* ``f32`` -- float32 image or probability data, values in [0, 1]
* ``u8``  -- binary mask, values in {0, 1}
* ``u32`` -- instance labels, 0 is background

Volumes are stored on disk as a pair of files: ``<path>.json`` holding the
header and ``<path>.raw`` holding the little-endian payload, z-major.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DTYPE_TAGS = {"f32": np.float32, "u8": np.uint8, "u32": np.uint32}
_TAG_BY_KIND = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8",
                np.dtype(np.uint32): "u32"}
_WIRE_DTYPES = {"f32": "<f4", "u8": "u1", "u32": "<u4"}


class VolumeError(Exception):
    """Base class for volume container and I/O failures."""


class InvalidDimsError(VolumeError):
    """Volume dimensions are malformed (wrong rank or non-positive)."""


class UnsupportedDtypeError(VolumeError):
    """Element type not one of f32 / u8 / u32."""


class CorruptFileError(VolumeError):
    """Header and payload disagree, or the payload is truncated."""


@dataclass(frozen=True)
class VolumeHeader:
    """Sidecar metadata: dims, dtype tag, and informational voxel size (nm)."""

    dims: tuple[int, int, int]
    dtype: str
    voxel_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def to_json(self) -> str:
        return json.dumps({"dims": list(self.dims), "dtype": self.dtype,
                           "voxel_nm": list(self.voxel_nm)})

    @classmethod
    def from_json(cls, text: str) -> "VolumeHeader":
        try:
            obj = json.loads(text)
            dims = tuple(int(d) for d in obj["dims"])
            dtype = str(obj["dtype"])
            voxel_nm = tuple(float(v) for v in obj.get("voxel_nm", (1, 1, 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFileError(f"malformed volume header: {exc}") from exc
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise InvalidDimsError(f"invalid dims {list(dims)}: need 3 positive axes")
        if dtype not in DTYPE_TAGS:
            raise UnsupportedDtypeError(f"unknown dtype tag {dtype!r}")
        return cls(dims, dtype, voxel_nm)  # type: ignore[arg-type]


@dataclass
class Volume:
    """A dense (D, H, W) grid, z-major and contiguous.

    Invariants are checked at construction: u8 volumes contain only {0, 1},
    f32 volumes are finite and within [0, 1], u32 volumes use 0 as background.
    """

    data: np.ndarray
    voxel_nm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype_tag: str = field(init=False)

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data)
        if arr.ndim != 3 or any(d <= 0 for d in arr.shape):
            raise InvalidDimsError(
                f"invalid dims {list(arr.shape)}: need 3 positive axes")
        kind = arr.dtype
        if kind not in _TAG_BY_KIND:
            raise UnsupportedDtypeError(
                f"unsupported element type {kind}; use float32, uint8 or uint32")
        tag = _TAG_BY_KIND[kind]
        if tag == "u8" and arr.size and arr.max() > 1:
            raise VolumeError("binary volume contains values outside {0, 1}")
        if tag == "f32" and arr.size:
            if not np.isfinite(arr).all():
                raise VolumeError("float volume contains non-finite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise VolumeError("float volume has values outside [0, 1]")
        self.data = arr
        self.dtype_tag = tag

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def header(self) -> VolumeHeader:
        return VolumeHeader(self.dims, self.dtype_tag, self.voxel_nm)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dtype_tag == other.dtype_tag
                and self.dims == other.dims
                and np.array_equal(self.data, other.data))


def save_volume(v: Volume, path: str | os.PathLike) -> None:
    """Write ``<path>.json`` header plus ``<path>.raw`` little-endian payload."""
    path = os.fspath(path)
    payload = v.data.astype(_WIRE_DTYPES[v.dtype_tag], copy=False)
    try:
        with open(path + ".json", "w", encoding="utf-8") as fh:
            fh.write(v.header().to_json())
        with open(path + ".raw", "wb") as fh:
            fh.write(payload.tobytes(order="C"))
    except OSError as exc:
        raise VolumeError(f"failed to write volume at {path!r}: {exc}") from exc


def load_volume(path: str | os.PathLike) -> Volume:
    """Load a volume written by :func:`save_volume`.

    Raises :class:`CorruptFileError` when the payload size disagrees with the
    header, :class:`UnsupportedDtypeError` for unknown dtype tags and
    :class:`InvalidDimsError` for degenerate dims.
    """
    path = os.fspath(path)
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            header = VolumeHeader.from_json(fh.read())
        with open(path + ".raw", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VolumeError(f"failed to read volume at {path!r}: {exc}") from exc
    wire = np.dtype(_WIRE_DTYPES[header.dtype])
    expected = int(np.prod(header.dims)) * wire.itemsize
    if len(blob) != expected:
        raise CorruptFileError(
            f"{path!r}: payload has {len(blob)} bytes, header implies {expected}")
    arr = np.frombuffer(blob, dtype=wire).reshape(header.dims)
    arr = arr.astype(DTYPE_TAGS[header.dtype])
    return Volume(arr, voxel_nm=header.voxel_nm)


def binarize_instances(labels: Volume | np.ndarray) -> Volume:
    """Binary foreground mask: 1 wherever the instance id is nonzero."""
    arr = labels.data if isinstance(labels, Volume) else labels
    return Volume((arr != 0).astype(np.uint8))


def boundary_from_instances(labels: Volume | np.ndarray, thickness: int = 1) -> Volume:
    """Per-slice contour mask derived from instance labels.

    A foreground voxel is boundary iff some position within Chebyshev
    distance ``thickness`` in the same z-slice carries a different instance
    id; positions outside the slice count as background. The result is a
    subset of the foreground mask.
    """
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    arr = labels.data if isinstance(labels, Volume) else labels
    arr = np.asarray(arr)
    t = int(thickness)
    # Pad with background so volume edges count as contours.
    padded = np.pad(arr, ((0, 0), (t, t), (t, t)), constant_values=0)
    h, w = arr.shape[1], arr.shape[2]
    boundary = np.zeros(arr.shape, dtype=bool)
    for dy in range(-t, t + 1):
        for dx in range(-t, t + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[:, t + dy:t + dy + h, t + dx:t + dx + w]
            boundary |= shifted != arr
    boundary &= arr != 0
    return Volume(boundary.astype(np.uint8))
