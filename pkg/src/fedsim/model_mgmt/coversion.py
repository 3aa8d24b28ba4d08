"""Hash-chained append-only log and the co-versioning registry built on it.

File format: a sequence of frames, each ``u32 length | body | parent(32) |
digest(32)`` with ``length = len(body)`` and
``digest = SHA-256(parent || body)``. The first record's parent is 32 zero
bytes. ``body`` starts with a one-byte record kind.

Co-version body (kind 0)::

    u64 global_version | model_digest(32) | u32 n |
    n x (u16 id_len | id utf-8 | u64 local_version | update_digest(32))
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from fedsim.errors import ChainIntegrityError, DecodeError, NotFoundError

__all__ = [
    "GENESIS_DIGEST",
    "KIND_COVERSION",
    "KIND_REWARD",
    "ChainRecord",
    "HashChainLog",
    "CoVersionRecord",
    "CoVersionRegistry",
    "record_co_version",
    "query_lineage",
    "verify_chain",
    "atomic_write_bytes",
]

GENESIS_DIGEST = bytes(32)
KIND_COVERSION = 0
KIND_REWARD = 1

_FRAME_LEN = struct.Struct("<I")
_CV_HEAD = struct.Struct("<Q32sI")
_CV_ENTRY = struct.Struct("<Q32s")
_ID_LEN = struct.Struct("<H")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class ChainRecord:
    index: int
    body: bytes
    parent_digest: bytes
    digest: bytes

    @property
    def kind(self) -> int:
        return self.body[0]

    def frame(self) -> bytes:
        return _FRAME_LEN.pack(len(self.body)) + self.body + self.parent_digest + self.digest


def _digest(parent: bytes, body: bytes) -> bytes:
    return hashlib.sha256(parent + body).digest()


def verify_chain(records: Sequence[ChainRecord]) -> int | None:
    """Index of the first record that breaks the chain, or ``None`` if it verifies."""
    parent = GENESIS_DIGEST
    for i, rec in enumerate(records):
        if rec.parent_digest != parent or _digest(rec.parent_digest, rec.body) != rec.digest:
            return i
        parent = rec.digest
    return None


class HashChainLog:
    """Append-only list of hash-linked records.

    Appends are serialized by a lock and publish fully built records, so
    concurrent readers see either the old or the new tail, never half of one.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[ChainRecord] = []

    @property
    def head(self) -> bytes:
        records = self._records
        return records[-1].digest if records else GENESIS_DIGEST

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> tuple[ChainRecord, ...]:
        return tuple(self._records)

    def append(self, kind: int, payload: bytes, parent_digest: bytes | None = None) -> ChainRecord:
        body = bytes([kind]) + payload
        with self._lock:
            head = self.head
            if parent_digest is not None and parent_digest != head:
                raise ChainIntegrityError(
                    "parent digest does not match the chain head (tampering or skipped round)",
                    index=len(self._records),
                )
            rec = ChainRecord(len(self._records), body, head, _digest(head, body))
            self._records.append(rec)
            return rec

    def verify(self) -> None:
        bad = verify_chain(self._records)
        if bad is not None:
            raise ChainIntegrityError(f"chain verification failed at record {bad}", index=bad)

    def to_bytes(self) -> bytes:
        return b"".join(r.frame() for r in self.records())

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, *, verify: bool = True) -> "HashChainLog":
        """Parse frames; with ``verify`` a broken link raises ``ChainIntegrityError``."""
        records: list[ChainRecord] = []
        pos = 0

        def framing_error(index: int, what: str) -> ChainIntegrityError:
            # a corrupted length prefix shows up as a framing error further on;
            # report the earliest record that fails either check
            bad = verify_chain(records)
            if bad is not None:
                return ChainIntegrityError(f"chain verification failed at record {bad}", index=bad)
            return ChainIntegrityError(f"{what} at record {index}", index=index)

        while pos < len(data):
            index = len(records)
            if len(data) - pos < _FRAME_LEN.size:
                raise framing_error(index, "truncated frame")
            (length,) = _FRAME_LEN.unpack_from(data, pos)
            end = pos + _FRAME_LEN.size + length + 64
            if length == 0 or end > len(data):
                raise framing_error(index, "bad frame length")
            body = data[pos + _FRAME_LEN.size : end - 64]
            records.append(ChainRecord(index, body, data[end - 64 : end - 32], data[end - 32 : end]))
            pos = end
        log = cls()
        log._records = records
        if verify:
            log.verify()
        return log

    @classmethod
    def load(cls, path: str | os.PathLike, *, verify: bool = True) -> "HashChainLog":
        return cls.from_bytes(Path(path).read_bytes(), verify=verify)


@dataclass(frozen=True)
class CoVersionRecord:
    global_version: int
    contributing: tuple[tuple[str, int, bytes], ...]
    parent_global_digest: bytes
    record_digest: bytes
    model_digest: bytes = GENESIS_DIGEST

    @staticmethod
    def encode(global_version: int, contributing: Iterable[tuple[str, int, bytes]], model_digest: bytes) -> bytes:
        contributing = list(contributing)
        parts = [_CV_HEAD.pack(global_version, model_digest, len(contributing))]
        for client_id, local_version, update_digest in contributing:
            raw = client_id.encode("utf-8")
            if len(update_digest) != 32:
                raise ValueError("update digests must be 32 bytes")
            parts.append(_ID_LEN.pack(len(raw)) + raw + _CV_ENTRY.pack(local_version, update_digest))
        return b"".join(parts)

    @classmethod
    def from_chain(cls, rec: ChainRecord) -> "CoVersionRecord":
        body = rec.body
        if body[0] != KIND_COVERSION:
            raise DecodeError(f"record {rec.index} is not a co-version record")
        try:
            version, model_digest, n = _CV_HEAD.unpack_from(body, 1)
            pos = 1 + _CV_HEAD.size
            contributing = []
            for _ in range(n):
                (id_len,) = _ID_LEN.unpack_from(body, pos)
                pos += _ID_LEN.size
                client_id = body[pos : pos + id_len].decode("utf-8")
                pos += id_len
                local_version, update_digest = _CV_ENTRY.unpack_from(body, pos)
                pos += _CV_ENTRY.size
                contributing.append((client_id, local_version, update_digest))
        except (struct.error, UnicodeDecodeError) as exc:
            raise DecodeError(f"corrupt co-version record {rec.index}: {exc}") from None
        if pos != len(body):
            raise DecodeError(f"trailing bytes in co-version record {rec.index}")
        return cls(version, tuple(contributing), rec.parent_digest, rec.digest, model_digest)


class CoVersionRegistry:
    """Provenance of every global model: which local model versions produced it."""

    def __init__(self, log: HashChainLog | None = None):
        self.log = log if log is not None else HashChainLog()
        self._by_version: dict[int, CoVersionRecord] = {}
        self._by_model: dict[bytes, CoVersionRecord] = {}
        self._local_entries = 0
        for rec in self.log.records():
            if rec.kind == KIND_COVERSION:
                self._index(CoVersionRecord.from_chain(rec))

    def _index(self, cv: CoVersionRecord) -> None:
        self._by_version[cv.global_version] = cv
        self._by_model.setdefault(cv.model_digest, cv)
        self._local_entries += len(cv.contributing)

    @property
    def head(self) -> bytes:
        return self.log.head

    def record(
        self,
        global_version: int,
        contributing: Iterable[tuple[str, int, bytes]],
        parent_digest: bytes,
        model_digest: bytes = GENESIS_DIGEST,
    ) -> CoVersionRecord:
        if global_version in self._by_version:
            raise ValueError(f"global version {global_version} already recorded")
        payload = CoVersionRecord.encode(global_version, contributing, model_digest)
        rec = self.log.append(KIND_COVERSION, payload, parent_digest)
        cv = CoVersionRecord.from_chain(rec)
        self._index(cv)
        return cv

    def lineage(self, global_version: int) -> list[tuple[str, int]]:
        cv = self._by_version.get(global_version)
        if cv is None:
            if global_version == 0:
                # the initial model was produced by no client
                return []
            raise NotFoundError(f"global version {global_version} not found")
        return [(c, v) for c, v, _ in cv.contributing]

    def get(self, global_version: int) -> CoVersionRecord:
        try:
            return self._by_version[global_version]
        except KeyError:
            raise NotFoundError(f"global version {global_version} not found") from None

    def has_model(self, model_digest: bytes) -> bool:
        return model_digest in self._by_model

    def versions(self) -> list[int]:
        return sorted(self._by_version)

    @property
    def global_record_count(self) -> int:
        return len(self._by_version)

    @property
    def local_entry_count(self) -> int:
        return self._local_entries

    def verify(self) -> None:
        self.log.verify()

    def save(self, path) -> None:
        self.log.save(path)

    @classmethod
    def load(cls, path, *, verify: bool = True) -> "CoVersionRegistry":
        return cls(HashChainLog.load(path, verify=verify))


def record_co_version(
    registry: CoVersionRegistry,
    global_version: int,
    contributing: Iterable[tuple[str, int, bytes]],
    parent_digest: bytes,
    model_digest: bytes = GENESIS_DIGEST,
) -> CoVersionRecord:
    return registry.record(global_version, contributing, parent_digest, model_digest)


def query_lineage(registry: CoVersionRegistry, global_version: int) -> list[tuple[str, int]]:
    return registry.lineage(global_version)
