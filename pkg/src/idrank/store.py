"""Binary embedding-set storage.

An embedding set is a dense float32 matrix with per-row image and identity
labels, persisted in a single self-describing file:

    magic  b"IDRK"                      4 bytes
    format version                      u32 LE (currently 1)
    dim                                 u32 LE
    count                               u64 LE
    matrix                              count * dim float32 LE, row-major
    string table, per row:              image_id then identity_id, each as
                                        u32 LE byte length + UTF-8 bytes
    CRC-32 (IEEE) of everything above   u32 LE

Values are stored raw; nothing is renormalized on load.  Any normalization
is an explicit transform (:func:`normalize_rows`).
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"IDRK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")
_U32 = struct.Struct("<I")

# rows serialized per chunk while streaming the matrix
_MATRIX_CHUNK_ROWS = 65536

GENDERS = frozenset({"male", "female", "unknown"})


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Immutable matrix of embeddings plus per-row image/identity labels.

    Instances are safe to share read-only across threads; the vector matrix
    is marked non-writeable on construction.
    """

    vectors: np.ndarray
    image_ids: tuple[str, ...]
    identity_ids: tuple[str, ...]

    def __post_init__(self):
        mat = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if mat.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {mat.shape}")
        mat.flags.writeable = False
        object.__setattr__(self, "vectors", mat)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "identity_ids", tuple(self.identity_ids))
        self._check_invariants()

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def _check_invariants(self) -> None:
        if self.dim < 1:
            raise ValidationError("dim must be a positive integer")
        if len(self.image_ids) != self.count or len(self.identity_ids) != self.count:
            raise ValidationError(
                f"label lengths ({len(self.image_ids)}, {len(self.identity_ids)}) "
                f"do not match row count {self.count}"
            )
        finite = np.isfinite(self.vectors)
        if not finite.all():
            bad = int(np.nonzero(~finite.all(axis=1))[0][0])
            raise ValidationError(f"non-finite value in row {bad}")
        if len(set(self.image_ids)) != self.count:
            dup = _first_duplicate(self.image_ids)
            raise ValidationError(f"duplicate image_id {dup!r}")

    def row_index(self) -> dict[str, int]:
        """Map image_id -> row number."""
        return {img: i for i, img in enumerate(self.image_ids)}

    def rows_by_identity(self) -> dict[str, list[int]]:
        """Group row numbers by identity label, preserving row order."""
        out: dict[str, list[int]] = {}
        for i, ident in enumerate(self.identity_ids):
            out.setdefault(ident, []).append(i)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.vectors.shape == other.vectors.shape
            and self.image_ids == other.image_ids
            and self.identity_ids == other.identity_ids
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def __repr__(self) -> str:
        return f"EmbeddingSet(count={self.count}, dim={self.dim})"


@dataclass(frozen=True)
class IdentityRecord:
    """One identity as it appears in a source list."""

    identity_id: str
    display_name: str
    gender: str
    image_count: int = 0

    def __post_init__(self):
        if not self.identity_id:
            raise ValidationError("identity_id must be non-empty")
        if self.gender not in GENDERS:
            raise ValidationError(
                f"gender must be one of {sorted(GENDERS)}, got {self.gender!r}"
            )
        if self.image_count < 0:
            raise ValidationError("image_count must be non-negative")


def _first_duplicate(items: Sequence[str]) -> str:
    seen: set[str] = set()
    for it in items:
        if it in seen:
            return it
        seen.add(it)
    raise ValueError("no duplicate present")


def _serialized_chunks(es: EmbeddingSet) -> Iterator[bytes]:
    """Yield the file body (everything before the CRC trailer) as chunks."""
    yield _HEADER.pack(MAGIC, FORMAT_VERSION, es.dim, es.count)
    mat = es.vectors
    for lo in range(0, es.count, _MATRIX_CHUNK_ROWS):
        yield mat[lo : lo + _MATRIX_CHUNK_ROWS].tobytes()
    buf = io.BytesIO()
    for img, ident in zip(es.image_ids, es.identity_ids):
        for label in (img, ident):
            raw = label.encode("utf-8")
            buf.write(_U32.pack(len(raw)))
            buf.write(raw)
        if buf.tell() >= 1 << 20:
            yield buf.getvalue()
            buf = io.BytesIO()
    tail = buf.getvalue()
    if tail:
        yield tail


def write_embedding_set(es: EmbeddingSet, sink: BinaryIO) -> int:
    """Serialize ``es`` to ``sink``; returns total bytes written.

    Round-trips losslessly with :func:`read_embedding_set`.
    """
    crc = 0
    written = 0
    for chunk in _serialized_chunks(es):
        crc = zlib.crc32(chunk, crc)
        sink.write(chunk)
        written += len(chunk)
    sink.write(_U32.pack(crc))
    return written + 4


def fingerprint(es: EmbeddingSet) -> str:
    """Content hash of the set: the CRC-32 its serialized file would carry."""
    crc = 0
    for chunk in _serialized_chunks(es):
        crc = zlib.crc32(chunk, crc)
    return f"crc32:{crc:08x}"


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(data)}")
    return data


def read_embedding_set(source: BinaryIO) -> EmbeddingSet:
    """Parse and validate a complete embedding file.

    Raises:
        FormatError: bad magic, unsupported version, truncation, trailing
            garbage, or CRC mismatch.
        ValidationError: decoded data violates an EmbeddingSet invariant
            (non-finite values name the offending row).
    """
    header = _read_exact(source, _HEADER.size, "header")
    magic, version, dim, count = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an embedding file")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dim == 0:
        raise FormatError("dim must be positive")
    crc = zlib.crc32(header)

    matrix = np.empty(count * dim, dtype="<f4")
    view = matrix.view(np.uint8)
    nbytes = matrix.nbytes
    filled = 0
    while filled < nbytes:
        step = min(1 << 24, nbytes - filled)
        chunk = _read_exact(source, step, "matrix")
        view[filled : filled + step] = np.frombuffer(chunk, dtype=np.uint8)
        crc = zlib.crc32(chunk, crc)
        filled += step

    rest = source.read()
    if len(rest) < 4:
        raise FormatError("truncated file: missing CRC trailer")
    table, stored_crc = rest[:-4], _U32.unpack(rest[-4:])[0]
    crc = zlib.crc32(table, crc)
    if crc != stored_crc:
        raise FormatError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )

    image_ids: list[str] = []
    identity_ids: list[str] = []
    pos = 0
    for row in range(count):
        for dest in (image_ids, identity_ids):
            if pos + 4 > len(table):
                raise FormatError(f"truncated string table at row {row}")
            (length,) = _U32.unpack_from(table, pos)
            pos += 4
            if pos + length > len(table):
                raise FormatError(f"truncated string table at row {row}")
            dest.append(table[pos : pos + length].decode("utf-8"))
            pos += length
    if pos != len(table):
        raise FormatError(f"{len(table) - pos} unexpected trailing bytes in string table")

    return EmbeddingSet(
        vectors=matrix.reshape(count, dim),
        image_ids=tuple(image_ids),
        identity_ids=tuple(identity_ids),
    )


def write_embedding_file(es: EmbeddingSet, path: str | Path) -> int:
    with open(path, "wb") as f:
        return write_embedding_set(es, f)


def read_embedding_file(path: str | Path) -> EmbeddingSet:
    with open(path, "rb") as f:
        return read_embedding_set(f)


def concat(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    """Row-order concatenation of embedding sets sharing one dimensionality.

    An empty input list is an error: the result's dim would be undefined.
    """
    if not sets:
        raise ValidationError("cannot concatenate an empty list of embedding sets")
    dim = sets[0].dim
    for s in sets[1:]:
        if s.dim != dim:
            raise ValidationError(f"dimension mismatch: {s.dim} != {dim}")
    image_ids: list[str] = []
    identity_ids: list[str] = []
    seen: set[str] = set()
    for s in sets:
        for img in s.image_ids:
            if img in seen:
                raise ValidationError(f"duplicate image_id {img!r} across sets")
            seen.add(img)
        image_ids.extend(s.image_ids)
        identity_ids.extend(s.identity_ids)
    return EmbeddingSet(
        vectors=np.concatenate([s.vectors for s in sets], axis=0)
        if len(sets) > 1
        else sets[0].vectors,
        image_ids=tuple(image_ids),
        identity_ids=tuple(identity_ids),
    )


def normalize_rows(es: EmbeddingSet) -> EmbeddingSet:
    """Project every embedding onto the unit sphere (explicit transform)."""
    norms = np.linalg.norm(es.vectors.astype(np.float64), axis=1)
    if (norms == 0).any():
        bad = int(np.nonzero(norms == 0)[0][0])
        raise ValidationError(f"cannot normalize zero vector in row {bad}")
    scaled = (es.vectors / norms[:, None].astype(np.float32)).astype(np.float32)
    return EmbeddingSet(scaled, es.image_ids, es.identity_ids)


IDENTITY_CSV_HEADER = ("identity_id", "display_name", "gender", "image_count")


def read_identity_csv(path: str | Path) -> list[IdentityRecord]:
    """Load an identity list from CSV with the canonical four-column header."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise FormatError(f"{path}: empty identity CSV") from None
        if header != IDENTITY_CSV_HEADER:
            raise FormatError(
                f"{path}: expected header {','.join(IDENTITY_CSV_HEADER)}, "
                f"got {','.join(header)}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            ident, name, gender, count = row
            try:
                records.append(
                    IdentityRecord(ident, name, gender, int(count))
                )
            except (ValueError, ValidationError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return records


def write_identity_csv(records: Iterable[IdentityRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(IDENTITY_CSV_HEADER)
        for rec in records:
            writer.writerow([rec.identity_id, rec.display_name, rec.gender, rec.image_count])
