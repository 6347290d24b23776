"""Tag file codecs.

Binary layout (little-endian):

    offset 0   4 bytes   magic b"CSTG"
    offset 4   u16       format version (1)
    offset 6   u32       header length in bytes
    offset 10  header    UTF-8 text: [source], [experiment] and [stream] sections
    then       records   16 bytes each: channel u16, pulse_index u48, timestamp_ps u64

The CSV variant carries the same header as `# `-prefixed comment lines followed
by a `channel,pulse_index,timestamp_ps` column row.
"""

import io
import os
import struct
import tempfile
from collections.abc import Generator
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Literal

import numpy as np

from cascade_tools.cascade import TimeTagStream
from cascade_tools.config import parse_stream_header, serialize_stream_header
from cascade_tools.errors import FormatError, ValidationError
from cascade_tools.observability import get_logger, traced_operation

MAGIC = b"CSTG"
VERSION = 1
PREAMBLE = struct.Struct("<4sHI")
RECORD_DTYPE = np.dtype(
    [("channel", "<u2"), ("pulse_lo", "<u2"), ("pulse_hi", "<u4"), ("timestamp", "<u8")]
)
CSV_MARKER = "# CSTG-CSV 1"
CSV_COLUMNS = "channel,pulse_index,timestamp_ps"

TagFormat = Literal["binary", "csv"]

MAX_PULSE_INDEX = 2**48 - 1


@contextmanager
def atomic_output(path: Path, mode: str = "wb") -> Generator[IO, None, None]:
    """Write to a temporary sibling and rename over `path` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    tmp = Path(tmp_name)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_text_atomic(path: Path, text: str) -> None:
    with atomic_output(path, "w") as f:
        f.write(text)


def _records(stream: TimeTagStream) -> np.ndarray:
    if stream.record_count and int(stream.pulse_index.max()) > MAX_PULSE_INDEX:
        raise ValidationError("pulse_index", "exceeds the 48-bit range of the tag format")
    if stream.record_count and int(stream.pulse_index.min()) < 0:
        raise ValidationError("pulse_index", "must be >= 0")
    records = np.empty(stream.record_count, dtype=RECORD_DTYPE)
    records["channel"] = stream.channel
    records["pulse_lo"] = stream.pulse_index & 0xFFFF
    records["pulse_hi"] = stream.pulse_index >> 16
    records["timestamp"] = stream.timestamp
    return records


def encode_binary(stream: TimeTagStream) -> bytes:
    header = serialize_stream_header(stream.params, stream.config, stream.record_count).encode("utf-8")
    return PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + _records(stream).tobytes()


def encode_csv(stream: TimeTagStream) -> str:
    header = serialize_stream_header(stream.params, stream.config, stream.record_count)
    out = io.StringIO()
    out.write(CSV_MARKER + "\n")
    for line in header.splitlines():
        out.write(f"# {line}\n" if line else "#\n")
    out.write(CSV_COLUMNS + "\n")
    if stream.record_count:
        table = np.column_stack([stream.channel.astype(np.int64), stream.pulse_index, stream.timestamp])
        np.savetxt(out, table, fmt="%d", delimiter=",")
    return out.getvalue()


def write_tagfile(stream: TimeTagStream, path: Path, fmt: TagFormat = "binary") -> None:
    """Write a stream atomically in the binary or CSV encoding."""
    if fmt not in ("binary", "csv"):
        raise ValidationError("format", f"expected 'binary' or 'csv', got '{fmt}'")
    with traced_operation(
        "write_tagfile", {"path": str(path), "format": fmt, "records": stream.record_count}
    ):
        if fmt == "binary":
            data = encode_binary(stream)
            with atomic_output(path, "wb") as f:
                f.write(data)
        else:
            write_text_atomic(path, encode_csv(stream))


def _check_sorted(timestamps: np.ndarray, offsets: np.ndarray) -> None:
    if len(timestamps) > 1:
        bad = np.nonzero(np.diff(timestamps) < 0)[0]
        if len(bad):
            i = int(bad[0]) + 1
            raise FormatError(f"record {i} is out of timestamp order", int(offsets[i]))


def _parse_header(text: str, offset: int) -> tuple:
    try:
        return parse_stream_header(text)
    except ValidationError as e:
        raise FormatError(f"invalid header: {e}", offset) from None


def decode_binary(data: bytes) -> TimeTagStream:
    if len(data) < PREAMBLE.size:
        raise FormatError(f"file too short for the {PREAMBLE.size}-byte preamble", len(data))
    magic, version, header_len = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    body_start = PREAMBLE.size + header_len
    if len(data) < body_start:
        raise FormatError(f"header truncated: expected {header_len} bytes", len(data))
    try:
        header = data[PREAMBLE.size : body_start].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("header is not valid UTF-8", PREAMBLE.size + e.start) from None
    params, config, expected = _parse_header(header, PREAMBLE.size)

    body = len(data) - body_start
    actual, remainder = divmod(body, RECORD_DTYPE.itemsize)
    if actual != expected or remainder:
        raise FormatError(
            f"record count mismatch: header declares {expected} records, body holds {actual}"
            + (f" and {remainder} trailing bytes" if remainder else ""),
            body_start + actual * RECORD_DTYPE.itemsize,
        )
    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=expected, offset=body_start)
    timestamps = records["timestamp"].astype(np.int64)
    _check_sorted(timestamps, body_start + RECORD_DTYPE.itemsize * np.arange(expected))
    pulse_index = records["pulse_lo"].astype(np.int64) | (records["pulse_hi"].astype(np.int64) << 16)
    return TimeTagStream(params, config, records["channel"], timestamps, pulse_index)


def decode_csv(data: bytes) -> TimeTagStream:
    text = data.decode("utf-8")
    lines = text.splitlines(keepends=True)
    starts = np.concatenate([[0], np.cumsum([len(line.encode("utf-8")) for line in lines])])
    header_lines = []
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        header_lines.append(lines[i][2:].rstrip("\n") if len(lines[i]) > 2 else "")
        i += 1
    if i >= len(lines) or lines[i].strip() != CSV_COLUMNS:
        raise FormatError(f"expected column row '{CSV_COLUMNS}'", int(starts[min(i, len(lines))]))
    params, config, expected = _parse_header("\n".join(header_lines), int(starts[1]))

    rows = [line for line in lines[i + 1 :] if line.strip()]
    if len(rows) != expected:
        raise FormatError(
            f"record count mismatch: header declares {expected} records, body holds {len(rows)}",
            len(data),
        )
    if expected:
        try:
            table = np.loadtxt(io.StringIO("".join(rows)), delimiter=",", dtype=np.int64, ndmin=2)
        except ValueError as e:
            raise FormatError(f"malformed record: {e}", int(starts[i + 1])) from None
        if table.shape[1] != 3:
            raise FormatError("records must have three columns", int(starts[i + 1]))
    else:
        table = np.zeros((0, 3), dtype=np.int64)
    _check_sorted(table[:, 2], starts[i + 1 : i + 1 + expected])
    return TimeTagStream(params, config, table[:, 0], table[:, 2], table[:, 1])


def read_tagfile(path: Path) -> TimeTagStream:
    """Read a tag file, detecting the encoding from its first bytes."""
    path = Path(path)
    with traced_operation("read_tagfile", {"path": str(path)}) as span:
        try:
            data = path.read_bytes()
        except OSError as e:
            raise ValidationError("tagfile", f"cannot read {path}: {e.strerror}") from None
        if data.startswith(MAGIC):
            stream = decode_binary(data)
        elif data.startswith(CSV_MARKER.encode("utf-8")):
            stream = decode_csv(data)
        else:
            raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r} or a CSV tag header", 0)
        span.set_attribute("records", stream.record_count)
        get_logger().debug("Read tag file", path=str(path), records=stream.record_count)
        return stream
