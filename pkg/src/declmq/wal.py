"""Write-ahead log, snapshot files, and the store manifest.

File layout inside a store directory:

    MANIFEST        json: application source text plus a queue catalog
    log             append-only records, replayed on open
    snapshot.N      full persistent state at some point; N increases
    lock            pid of the process holding the store open

Log format: a magic first line, then length-prefixed records.  Each record
is ``>II`` (payload length, CRC32 of payload) followed by a JSON payload.
A torn or checksum-failing tail is treated as the crash point and discarded;
a record whose checksum passes but whose payload is not decodable means real
damage and raises.  Reopening a log truncates it to the valid prefix first,
so appends never land beyond torn bytes where a later recovery would not
see them.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from datetime import datetime
from decimal import Decimal
from typing import Any, BinaryIO, Callable, Iterator

from .errors import CorruptLog

LOG_MAGIC = b"dmq-log-1\n"
SNAPSHOT_FORMAT = "dmq-snapshot-1"
MANIFEST_FORMAT = "dmq-manifest-1"

_HEADER = struct.Struct(">II")

# Record type tags.
ENQUEUE = "E"
MARK_PROCESSED = "M"
RESET = "R"
TXN_COMMIT = "C"
DELIVERED = "D"


class InjectedFailure(Exception):
    """Raised by a failpoint to simulate a crash mid-write."""


# A failpoint receives the bytes about to be written and either returns
# None (proceed) or an int: write only that many bytes, then die.
Failpoint = Callable[[bytes], int | None]


def pack_atomic(value: Any) -> list:
    """Encode a typed atomic as a json-safe [tag, repr] pair."""
    if isinstance(value, bool):
        return ["b", value]
    if isinstance(value, int):
        return ["i", str(value)]
    if isinstance(value, Decimal):
        return ["d", str(value)]
    if isinstance(value, datetime):
        return ["t", value.isoformat()]
    if isinstance(value, str):
        return ["s", value]
    raise TypeError(f"cannot encode {type(value).__name__} property value")


def unpack_atomic(pair: list) -> Any:
    tag, raw = pair
    if tag == "b":
        return bool(raw)
    if tag == "i":
        return int(raw)
    if tag == "d":
        return Decimal(raw)
    if tag == "t":
        return datetime.fromisoformat(raw)
    if tag == "s":
        return raw
    raise CorruptLog(f"unknown atomic tag {tag!r}")


def encode_record(payload: dict) -> bytes:
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(body), zlib.crc32(body)) + body


def _valid_prefix(path: str) -> int:
    """Byte length of the decodable prefix: magic plus whole, checksummed
    records. 0 when the magic itself is torn. Raises CorruptLog only when
    the leading bytes cannot be a partial magic."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(LOG_MAGIC))
        if magic != LOG_MAGIC:
            if LOG_MAGIC.startswith(magic):
                return 0
            raise CorruptLog(f"{path}: bad magic")
        offset = len(LOG_MAGIC)
        while True:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                return offset
            length, crc = _HEADER.unpack(header)
            if offset + _HEADER.size + length > size:
                return offset
            body = fh.read(length)
            if zlib.crc32(body) != crc:
                return offset
            offset += _HEADER.size + length


class LogWriter:
    def __init__(self, path: str, failpoint: Failpoint | None = None):
        self.path = path
        self.failpoint = failpoint
        if os.path.exists(path) and os.path.getsize(path) > 0:
            valid = _valid_prefix(path)
            if valid < os.path.getsize(path):
                with open(path, "r+b") as fh:
                    fh.truncate(valid)
                    fh.flush()
                    os.fsync(fh.fileno())
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh: BinaryIO = open(path, "ab")
        if fresh:
            self._write(LOG_MAGIC)
            self.sync()

    def _write(self, data: bytes) -> None:
        if self.failpoint is not None:
            keep = self.failpoint(data)
            if keep is not None:
                self._fh.write(data[:keep])
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
                raise InjectedFailure(f"died after {keep} of {len(data)} bytes")
        self._fh.write(data)

    def append(self, payload: dict) -> None:
        self._write(encode_record(payload))

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()


def read_log(path: str) -> Iterator[dict]:
    """Yield committed-or-not records in file order, dropping a torn tail."""
    with open(path, "rb") as fh:
        magic = fh.read(len(LOG_MAGIC))
        if magic != LOG_MAGIC:
            if LOG_MAGIC.startswith(magic):
                return  # creation itself was the crash point
            raise CorruptLog(f"{path}: bad magic")
        while True:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                return  # torn header: crash point
            length, crc = _HEADER.unpack(header)
            body = fh.read(length)
            if len(body) < length:
                return  # torn payload: crash point
            if zlib.crc32(body) != crc:
                # Checksum failures only happen on the torn final append:
                # reopening truncates garbage before anything new is written.
                return
            try:
                yield json.loads(body.decode("utf-8"))
            except ValueError as exc:
                raise CorruptLog(f"{path}: undecodable record: {exc}") from exc


def _atomic_write(path: str, data: bytes, failpoint: Failpoint | None = None) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        if failpoint is not None:
            keep = failpoint(data)
            if keep is not None:
                fh.write(data[:keep])
                fh.flush()
                os.fsync(fh.fileno())
                raise InjectedFailure(f"died writing {path}")
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_snapshot(directory: str, number: int, body: dict,
                   failpoint: Failpoint | None = None) -> str:
    body = dict(body, format=SNAPSHOT_FORMAT)
    raw = json.dumps(body, separators=(",", ":")).encode("utf-8")
    payload = json.dumps({"crc": zlib.crc32(raw), "body": body},
                         separators=(",", ":")).encode("utf-8")
    path = os.path.join(directory, f"snapshot.{number}")
    _atomic_write(path, payload, failpoint)
    return path


def load_latest_snapshot(directory: str) -> tuple[int, dict | None]:
    """Return (number, body) of the newest readable snapshot, (0, None) if none."""
    numbers = []
    for name in os.listdir(directory):
        if name.startswith("snapshot.") and not name.endswith(".tmp"):
            suffix = name.split(".", 1)[1]
            if suffix.isdigit():
                numbers.append(int(suffix))
    for number in sorted(numbers, reverse=True):
        path = os.path.join(directory, f"snapshot.{number}")
        try:
            with open(path, "rb") as fh:
                wrapper = json.load(fh)
            body = wrapper["body"]
            raw = json.dumps(body, separators=(",", ":")).encode("utf-8")
            if zlib.crc32(raw) != wrapper["crc"]:
                continue
            if body.get("format") != SNAPSHOT_FORMAT:
                continue
            return number, body
        except (ValueError, KeyError, OSError):
            continue  # half-written snapshot from a crash: fall back
    return 0, None


def drop_old_snapshots(directory: str, keep: int) -> None:
    for name in os.listdir(directory):
        if name.startswith("snapshot."):
            suffix = name.split(".", 1)[1]
            if suffix.isdigit() and int(suffix) < keep:
                os.unlink(os.path.join(directory, name))


def write_manifest(directory: str, source: str, queues: dict[str, dict]) -> None:
    payload = json.dumps(
        {"format": MANIFEST_FORMAT, "application": source, "queues": queues},
        indent=1,
    ).encode("utf-8")
    _atomic_write(os.path.join(directory, "MANIFEST"), payload)


def load_manifest(directory: str) -> dict | None:
    path = os.path.join(directory, "MANIFEST")
    if not os.path.exists(path):
        return None
    with open(path, "rb") as fh:
        data = json.load(fh)
    if data.get("format") != MANIFEST_FORMAT:
        raise CorruptLog(f"{path}: unknown manifest format")
    return data
