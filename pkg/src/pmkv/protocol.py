"""Wire framing for the TCP front end.

Requests are CRLF-terminated frames with decimal byte-length prefixes:

    PING\r\n
    GET <klen>\r\n<key>\r\n
    DEL <klen>\r\n<key>\r\n
    SET <klen>\r\n<key> <vlen>\r\n<value>\r\n
    SHUTDOWN\r\n

Replies use a one-sigil convention: "+" simple string, "-" error, ":" integer,
"$<n>" bulk payload, "$-1" missing.  Keys and values are length-prefixed but
must not contain CR or LF; the parser rejects frames that smuggle them in.

Everything here is pure byte shuffling over a file-like reader so it can be
exercised without sockets.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

from .errors import ProtocolError

MAX_KEY_WIRE = 64 << 10
MAX_VALUE_WIRE = 1 << 20
MAX_HEADER = 64  # longest legal header line: verb + one length field

VERBS_WITH_KEY = frozenset({"GET", "DEL", "SET"})
VERBS_BARE = frozenset({"PING", "SHUTDOWN"})


@dataclass(frozen=True)
class Command:
    verb: str
    key: bytes = b""
    value: bytes = b""


NIL = b"$-1\r\n"
OK = b"+OK\r\n"
PONG = b"+PONG\r\n"


def simple(text: str) -> bytes:
    return b"+" + text.encode("ascii") + b"\r\n"


def error(message: str) -> bytes:
    message = message.replace("\r", " ").replace("\n", " ")
    return b"-ERR " + message.encode("ascii", "replace") + b"\r\n"


def integer(n: int) -> bytes:
    return b":%d\r\n" % n


def bulk(payload: bytes) -> bytes:
    return b"$%d\r\n" % len(payload) + payload + b"\r\n"


def _read_line(r: BinaryIO) -> Optional[bytes]:
    """One CRLF-terminated line, without the terminator.  None on clean EOF."""
    line = r.readline(MAX_HEADER + 2)
    if not line:
        return None
    if not line.endswith(b"\r\n"):
        raise ProtocolError(f"unterminated or oversized header line: {line[:32]!r}")
    return line[:-2]


def _read_exact(r: BinaryIO, n: int, what: str) -> bytes:
    data = r.read(n)
    if data is None or len(data) != n:
        raise ProtocolError(f"connection ended inside {what}")
    return data


def _parse_len(token: bytes, limit: int, what: str) -> int:
    if not token.isdigit():
        raise ProtocolError(f"bad {what} length {token!r}")
    n = int(token)
    if n > limit:
        raise ProtocolError(f"{what} length {n} exceeds {limit}")
    return n


def _reject_crlf(data: bytes, what: str) -> None:
    if b"\r" in data or b"\n" in data:
        raise ProtocolError(f"{what} contains CR or LF")


def read_command(r: BinaryIO) -> Optional[Command]:
    """Parse one frame from a buffered reader; None on EOF between frames."""
    line = _read_line(r)
    if line is None:
        return None
    parts = line.split(b" ")
    verb = parts[0].decode("ascii", "replace").upper() if parts[0] else ""
    if verb in VERBS_BARE:
        if len(parts) != 1:
            raise ProtocolError(f"{verb} takes no arguments")
        return Command(verb)
    if verb not in VERBS_WITH_KEY:
        raise ProtocolError(f"unknown verb {parts[0][:16]!r}")
    if len(parts) != 2:
        raise ProtocolError(f"{verb} header wants one length field")
    klen = _parse_len(parts[1], MAX_KEY_WIRE, "key")
    if klen == 0:
        raise ProtocolError("key length 0")
    key = _read_exact(r, klen, "key")
    _reject_crlf(key, "key")
    tail = _read_line(r)
    if tail is None:
        raise ProtocolError("connection ended after key")
    if verb in ("GET", "DEL"):
        if tail:
            raise ProtocolError("key length prefix mismatches payload")
        return Command(verb, key)
    # SET: the key line continues with " <vlen>", then the value follows
    if not tail.startswith(b" ") or len(tail) < 2:
        raise ProtocolError("SET missing value length")
    vlen = _parse_len(tail[1:], MAX_VALUE_WIRE, "value")
    value = _read_exact(r, vlen, "value")
    _reject_crlf(value, "value")
    if _read_line(r) != b"":
        raise ProtocolError("value length prefix mismatches payload")
    return Command(verb, key, value)


def parse_command(data: bytes) -> Command:
    """Parse exactly one complete frame from raw bytes."""
    r = io.BytesIO(data)
    cmd = read_command(r)
    if cmd is None:
        raise ProtocolError("empty frame")
    if r.read(1):
        raise ProtocolError("trailing bytes after frame")
    return cmd


def encode_command(cmd: Command) -> bytes:
    if cmd.verb in VERBS_BARE:
        return cmd.verb.encode() + b"\r\n"
    if cmd.verb == "SET":
        return b"SET %d\r\n%s %d\r\n%s\r\n" % (
            len(cmd.key),
            cmd.key,
            len(cmd.value),
            cmd.value,
        )
    if cmd.verb in ("GET", "DEL"):
        return b"%s %d\r\n%s\r\n" % (cmd.verb.encode(), len(cmd.key), cmd.key)
    raise ProtocolError(f"unknown verb {cmd.verb!r}")


Reply = Union[bytes, int, None, str]


def read_reply(r: BinaryIO) -> Reply:
    """Client-side reply parser.

    "+text" -> str, ":n" -> int, "$n"+payload -> bytes, "$-1" -> None,
    "-ERR msg" -> raises ProtocolError.
    """
    line = _read_line(r)
    if line is None:
        raise ProtocolError("connection closed while awaiting reply")
    if line.startswith(b"+"):
        return line[1:].decode("ascii", "replace")
    if line.startswith(b"-"):
        raise ProtocolError(line[1:].decode("ascii", "replace"))
    if line.startswith(b":"):
        return int(line[1:])
    if line.startswith(b"$"):
        n = int(line[1:])
        if n == -1:
            return None
        payload = _read_exact(r, n, "bulk reply")
        if _read_exact(r, 2, "bulk terminator") != b"\r\n":
            raise ProtocolError("bulk reply missing terminator")
        return payload
    raise ProtocolError(f"unparseable reply line {line[:32]!r}")
