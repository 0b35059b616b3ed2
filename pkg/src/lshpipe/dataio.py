"""Readers and writers for the dimension-prefixed ANN vector file formats.

Each record is a 4-byte little-endian int32 dimension followed by d elements
(float32 for .fvecs, uint8 for .bvecs, int32 for .ivecs). uint8 elements are
widened to float32 at read time so the index operates on real vectors
uniformly; int32 files (ground-truth id lists) keep their integer dtype.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from lshpipe.family import FeatureVector

KINDS = {
    "float32": (np.dtype("<f4"), ".fvecs"),
    "uint8": (np.dtype("u1"), ".bvecs"),
    "int32": (np.dtype("<i4"), ".ivecs"),
}
_SUFFIX_KIND = {suffix: kind for kind, (_, suffix) in KINDS.items()}


class VectorFormatError(ValueError):
    """Malformed vector file; message carries the failing byte offset."""


@dataclass(frozen=True)
class VectorFile:
    path: str
    kind: str
    d: int
    count: int

    @property
    def record_bytes(self) -> int:
        return 4 + self.d * KINDS[self.kind][0].itemsize


class VectorSet:
    """A numpy-backed sequence of FeatureVectors: id array plus coord matrix."""

    def __init__(self, ids: np.ndarray, coords: np.ndarray):
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.shape[0] != coords.shape[0]:
            raise ValueError("ids and coords row counts differ")
        self.ids = ids
        self.coords = np.ascontiguousarray(coords)

    @classmethod
    def from_coords(cls, coords: np.ndarray, start_id: int = 0) -> "VectorSet":
        n = coords.shape[0]
        return cls(np.arange(start_id, start_id + n, dtype=np.int64), coords)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, i) -> FeatureVector:
        if isinstance(i, slice):
            return VectorSet(self.ids[i], self.coords[i])
        return FeatureVector(id=int(self.ids[i]), coords=self.coords[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def kind_for_path(path: str, kind: str | None = None) -> str:
    if kind is not None:
        if kind not in KINDS:
            raise ValueError(f"unknown element kind {kind!r}; expected one of {sorted(KINDS)}")
        return kind
    suffix = os.path.splitext(path)[1]
    if suffix not in _SUFFIX_KIND:
        raise ValueError(f"cannot infer element kind from suffix {suffix!r}; pass kind explicitly")
    return _SUFFIX_KIND[suffix]


def describe_vector_file(path: str, kind: str | None = None) -> VectorFile:
    """Validate the file frame (length, uniform dimension) without reading data."""
    kind = kind_for_path(path, kind)
    elem = KINDS[kind][0]
    size = os.path.getsize(path)
    if size == 0:
        return VectorFile(path=path, kind=kind, d=0, count=0)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise VectorFormatError(f"{path}: truncated dimension field at byte offset 0")
    d = int(np.frombuffer(head, dtype="<i4")[0])
    if d < 1:
        raise VectorFormatError(f"{path}: invalid dimension {d} at byte offset 0")
    rec = 4 + d * elem.itemsize
    if size % rec != 0:
        raise VectorFormatError(
            f"{path}: file length {size} is not a multiple of the {rec}-byte record; "
            f"trailing bytes start at offset {(size // rec) * rec}"
        )
    return VectorFile(path=path, kind=kind, d=d, count=size // rec)


def read_vectors(
    path: str | VectorFile,
    start: int = 0,
    stop: int | None = None,
    kind: str | None = None,
) -> VectorSet:
    """Read records [start, stop); ids are the file ordinal positions.

    Partial ranges let multiple reader copies ingest one file in parallel.
    """
    vf = path if isinstance(path, VectorFile) else describe_vector_file(path, kind)
    elem = KINDS[vf.kind][0]
    stop = vf.count if stop is None else stop
    if not 0 <= start <= stop <= vf.count:
        raise ValueError(f"range [{start}, {stop}) outside file with {vf.count} records")
    n = stop - start
    if n == 0 or vf.count == 0:
        return VectorSet(np.empty(0, dtype=np.int64), np.empty((0, max(vf.d, 0)), dtype=np.float32))
    rec = vf.record_bytes
    with open(vf.path, "rb") as fh:
        fh.seek(start * rec)
        raw = fh.read(n * rec)
    if len(raw) != n * rec:
        raise VectorFormatError(f"{vf.path}: truncated record at byte offset {start * rec + len(raw)}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    dims = rows[:, :4].copy().view("<i4").ravel()
    bad = np.flatnonzero(dims != vf.d)
    if bad.size:
        off = (start + int(bad[0])) * rec
        raise VectorFormatError(
            f"{vf.path}: record {start + int(bad[0])} has dimension {int(dims[bad[0]])} != {vf.d} "
            f"at byte offset {off}"
        )
    values = rows[:, 4:].copy().view(elem).reshape(n, vf.d)
    if vf.kind == "uint8":
        coords = values.astype(np.float32)
    elif vf.kind == "float32":
        coords = np.ascontiguousarray(values, dtype=np.float32)
    else:
        coords = np.ascontiguousarray(values, dtype=np.int32)
    return VectorSet(np.arange(start, stop, dtype=np.int64), coords)


def write_vectors(path: str, kind: str, vectors) -> VectorFile:
    """Write vectors in the standard dimension-prefixed layout."""
    if kind not in KINDS:
        raise ValueError(f"unknown element kind {kind!r}")
    elem = KINDS[kind][0]
    coords = getattr(vectors, "coords", None)
    if coords is None:
        coords = np.asarray(vectors)
    if coords.ndim != 2 and coords.size:
        raise ValueError("expected a 2-D array of vectors")
    n = coords.shape[0]
    d = coords.shape[1] if n else 0
    data = np.ascontiguousarray(coords, dtype=elem)
    rec = 4 + d * elem.itemsize
    out = np.empty((n, rec), dtype=np.uint8)
    out[:, :4] = np.full(n, d, dtype="<i4").view(np.uint8).reshape(n, 4)
    out[:, 4:] = data.view(np.uint8).reshape(n, d * elem.itemsize)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())
    return VectorFile(path=path, kind=kind, d=d, count=n)
