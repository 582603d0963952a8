"""Bit-exact binary container for named tensors.

Everything the pruning tools exchange on disk (weights, gradient samples,
masks, prunability flags) travels in one self-describing little-endian
format:

    magic    4 bytes   b"OVPT"
    version  u32       currently 1
    count    u32       number of tensors
    then per tensor, in container order:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8        0 = f32, 1 = f64, 2 = u8 mask
        ndim      u32
        dims      ndim x u64
        data      raw row-major values, little-endian

Masks are u8 with values restricted to {0, 1} (1 = kept). Round trips are
bit-exact: floats are never re-encoded, so NaN payloads and signed zeros
survive. The row-major flattening of each tensor is the global weight
index order every pruning module uses.

Tensor naming convention inside a container: ``layer.<id>.weight``,
``layer.<id>.grads`` (one row per sample), ``layer.<id>.mask`` and
``layer.<id>.prunable``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"OVPT"
VERSION = 1

# dtype tag <-> numpy dtype; stored data is always little-endian
_CODE_TO_NAME = {0: "f32", 1: "f64", 2: "u8"}
_NAME_TO_CODE = {v: k for k, v in _CODE_TO_NAME.items()}
_NAME_TO_NP = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}
_KIND_TO_NAME = {"f4": "f32", "f8": "f64", "u1": "u8"}

WEIGHT_SUFFIX = ".weight"
GRADS_SUFFIX = ".grads"
MASK_SUFFIX = ".mask"
PRUNABLE_SUFFIX = ".prunable"
_LAYER_PREFIX = "layer."


class ContainerError(Exception):
    """Base class for container parse/encode failures."""


class BadMagicError(ContainerError):
    """File does not start with the OVPT magic."""


class TruncatedError(ContainerError):
    """File ended before the advertised payload was complete."""


class UnknownDtypeError(ContainerError):
    """Tensor header used a dtype code this reader does not know."""


class UnsupportedVersionError(ContainerError):
    """Container version is not one this reader supports."""


def _dtype_name_for(arr: np.ndarray) -> str:
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _KIND_TO_NAME:
        raise ContainerError(
            f"array dtype {arr.dtype} not storable; use float32, float64 or uint8"
        )
    return _KIND_TO_NAME[key]


@dataclass(frozen=True)
class Tensor:
    """One named payload: dtype tag, shape, and flat row-major data."""

    dtype: str
    dims: tuple[int, ...]
    data: np.ndarray  # 1-D, little-endian, row-major

    def __post_init__(self) -> None:
        if self.dtype not in _NAME_TO_NP:
            raise UnknownDtypeError(f"unknown dtype name {self.dtype!r}")
        if len(self.dims) == 0:
            raise ContainerError("tensor dims must be non-empty")
        if any(int(d) <= 0 for d in self.dims):
            raise ContainerError(f"tensor dims must be positive, got {self.dims}")
        want = int(np.prod(self.dims, dtype=np.int64))
        flat = np.ascontiguousarray(self.data, dtype=_NAME_TO_NP[self.dtype]).reshape(-1)
        if flat.size != want:
            raise ContainerError(
                f"data has {flat.size} elements, dims {self.dims} imply {want}"
            )
        if self.dtype == "u8" and flat.size and not np.all((flat == 0) | (flat == 1)):
            raise ContainerError("u8 mask tensors may only contain 0 and 1")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr)
        return cls(_dtype_name_for(arr), tuple(arr.shape), arr.reshape(-1))

    def array(self) -> np.ndarray:
        """Return the data reshaped to ``dims`` (shares memory)."""
        return self.data.reshape(self.dims)

    def __eq__(self, other: object) -> bool:  # bitwise, NaN-safe
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self) -> None:  # type: ignore[override]
        raise TypeError("Tensor is not hashable")


@dataclass
class TensorContainer:
    """Ordered mapping of names to tensors; iteration order is insertion order."""

    entries: dict[str, Tensor] = field(default_factory=dict)
    version: int = VERSION

    def add(self, name: str, tensor: Tensor | np.ndarray) -> None:
        if name in self.entries:
            raise ContainerError(f"duplicate tensor name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor.from_array(tensor)
        self.entries[name] = tensor

    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorContainer):
            return NotImplemented
        return (
            self.version == other.version
            and list(self.entries) == list(other.entries)
            and all(self.entries[k] == other.entries[k] for k in self.entries)
        )


def write_container(path: str, container: TensorContainer) -> None:
    """Serialize ``container`` to ``path``. Same container, same bytes."""
    if container.version != VERSION:
        raise UnsupportedVersionError(f"cannot write version {container.version}")
    parts = [MAGIC, struct.pack("<II", container.version, len(container.entries))]
    for name, t in container.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _NAME_TO_CODE[t.dtype], len(t.dims)))
        parts.append(struct.pack(f"<{len(t.dims)}Q", *t.dims))
        parts.append(t.data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedError(f"file truncated while reading {what}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def read_container(path: str) -> TensorContainer:
    """Parse a container file; raises a distinct error per failure mode."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    count = cur.u32("tensor count")
    out = TensorContainer(version=version)
    for _ in range(count):
        name_len = cur.u32("name length")
        name = cur.take(name_len, "tensor name").decode("utf-8")
        code = cur.u8(f"dtype of tensor {name!r}")
        if code not in _CODE_TO_NAME:
            raise UnknownDtypeError(f"tensor {name!r} has unknown dtype code {code}")
        dtype = _CODE_TO_NAME[code]
        ndim = cur.u32(f"ndim of tensor {name!r}")
        dims_raw = cur.take(8 * ndim, f"dims of tensor {name!r}")
        dims = struct.unpack(f"<{ndim}Q", dims_raw)
        np_dtype = _NAME_TO_NP[dtype]
        n_elem = int(np.prod(dims, dtype=np.int64)) if ndim else 0
        raw = cur.take(n_elem * np_dtype.itemsize, f"data of tensor {name!r}")
        data = np.frombuffer(raw, dtype=np_dtype).copy()
        out.add(name, Tensor(dtype, tuple(int(d) for d in dims), data))
    if cur.pos != len(buf):
        raise ContainerError(
            f"{len(buf) - cur.pos} trailing bytes after the last tensor"
        )
    return out


@dataclass
class GradientSet:
    """Per-sample gradient rows for one layer: shape (N, d), one row per sample."""

    layer: str
    samples: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"gradient samples for {self.layer!r} must be 2-D")
        if s.shape[0] < 1:
            raise ValueError(f"gradient set for {self.layer!r} needs at least one row")
        self.samples = s

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])


# -- layer naming helpers ----------------------------------------------------

def weight_name(layer_id: str) -> str:
    return f"{_LAYER_PREFIX}{layer_id}{WEIGHT_SUFFIX}"


def grads_name(layer_id: str) -> str:
    return f"{_LAYER_PREFIX}{layer_id}{GRADS_SUFFIX}"


def mask_name(layer_id: str) -> str:
    return f"{_LAYER_PREFIX}{layer_id}{MASK_SUFFIX}"


def prunable_name(layer_id: str) -> str:
    return f"{_LAYER_PREFIX}{layer_id}{PRUNABLE_SUFFIX}"


def layer_ids(container: TensorContainer | Mapping[str, object]) -> list[str]:
    """Layer ids that have a ``layer.<id>.weight`` entry, sorted.

    Numeric ids sort numerically so layer.10 comes after layer.2; the order
    must not depend on how the writer happened to arrange the container.
    """
    ids = []
    for name in container:
        if name.startswith(_LAYER_PREFIX) and name.endswith(WEIGHT_SUFFIX):
            ids.append(name[len(_LAYER_PREFIX) : -len(WEIGHT_SUFFIX)])
    return sorted(ids, key=lambda s: (0, int(s)) if s.isdigit() else (1, s))
