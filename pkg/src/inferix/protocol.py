"""Framed wire protocol for streaming generated frames and control messages.

Layout per message: magic "INFX", version u8 (=1), kind u8, payload length
u32 LE, payload bytes, crc32 u32 LE over the payload. Kinds 7-15 are reserved
for future control signal types.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

from .errors import NeedMoreData, ProtocolError

MAGIC = b"INFX"
VERSION = 1
HEADER = struct.Struct("<4sBBI")  # magic, version, kind, payload_len
CRC = struct.Struct("<I")

MAX_PAYLOAD = 16 * 1024 * 1024
MAX_PROMPT_BYTES = 4096

HELLO = 1
FRAME = 2
PROMPT_UPDATE = 3
METRICS = 4
END = 5
ERROR = 6
_KNOWN_KINDS = frozenset((HELLO, FRAME, PROMPT_UPDATE, METRICS, END, ERROR))

KIND_NAMES = {
    HELLO: "HELLO",
    FRAME: "FRAME",
    PROMPT_UPDATE: "PROMPT_UPDATE",
    METRICS: "METRICS",
    END: "END",
    ERROR: "ERROR",
}


@dataclass(frozen=True)
class StreamMessage:
    kind: int
    payload: bytes = b""


def encode_message(msg: StreamMessage) -> bytes:
    if msg.kind not in _KNOWN_KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind}")
    payload = bytes(msg.payload)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload too large: {len(payload)} bytes")
    return (
        HEADER.pack(MAGIC, VERSION, msg.kind, len(payload))
        + payload
        + CRC.pack(zlib.crc32(payload))
    )


def decode_message(buf: bytes) -> tuple[StreamMessage, int]:
    """Decode one message from the front of buf; returns (message, consumed).

    Raises NeedMoreData when buf holds only a prefix of a valid message.
    """
    if len(buf) < HEADER.size:
        raise NeedMoreData(f"need {HEADER.size} header bytes, have {len(buf)}")
    magic, version, kind, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if kind not in _KNOWN_KINDS:
        raise ProtocolError(f"unknown message kind {kind}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload too large: {length}")
    total = HEADER.size + length + CRC.size
    if len(buf) < total:
        raise NeedMoreData(f"need {total} bytes, have {len(buf)}")
    payload = bytes(buf[HEADER.size:HEADER.size + length])
    (crc,) = CRC.unpack_from(buf, HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise ProtocolError("payload crc mismatch")
    return StreamMessage(kind, payload), total


class StreamDecoder:
    """Incremental reassembly for a byte stream of messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    def __iter__(self):
        return self

    def __next__(self) -> StreamMessage:
        try:
            msg, consumed = decode_message(bytes(self._buf))
        except NeedMoreData:
            raise StopIteration
        del self._buf[:consumed]
        return msg


# -- payload structs ---------------------------------------------------------

_FRAME_HEAD = struct.Struct("<IHHH")  # chunk_index, frame_index, width, height


@dataclass(frozen=True)
class FramePayload:
    chunk_index: int
    frame_index: int
    width: int
    height: int
    pixels: bytes  # width*height grayscale bytes

    def encode(self) -> bytes:
        if len(self.pixels) != self.width * self.height:
            raise ProtocolError(
                f"pixel count {len(self.pixels)} != {self.width}x{self.height}"
            )
        head = _FRAME_HEAD.pack(self.chunk_index, self.frame_index,
                                self.width, self.height)
        return head + self.pixels + CRC.pack(zlib.crc32(self.pixels))

    @classmethod
    def decode(cls, payload: bytes) -> "FramePayload":
        if len(payload) < _FRAME_HEAD.size + CRC.size:
            raise ProtocolError("frame payload truncated")
        chunk, frame, w, h = _FRAME_HEAD.unpack_from(payload)
        end = _FRAME_HEAD.size + w * h
        if len(payload) != end + CRC.size:
            raise ProtocolError("frame payload size mismatch")
        pixels = payload[_FRAME_HEAD.size:end]
        (crc,) = CRC.unpack_from(payload, end)
        if crc != zlib.crc32(pixels):
            raise ProtocolError("frame pixel crc mismatch")
        return cls(chunk, frame, w, h, pixels)


@dataclass(frozen=True)
class PromptUpdatePayload:
    effective_chunk: int
    text: str

    def encode(self) -> bytes:
        raw = self.text.encode("utf-8")
        if len(raw) > MAX_PROMPT_BYTES:
            raise ProtocolError(f"prompt too long: {len(raw)} bytes")
        return struct.pack("<IH", self.effective_chunk, len(raw)) + raw

    @classmethod
    def decode(cls, payload: bytes) -> "PromptUpdatePayload":
        if len(payload) < 6:
            raise ProtocolError("prompt payload truncated")
        chunk, length = struct.unpack_from("<IH", payload)
        if length > MAX_PROMPT_BYTES:
            raise ProtocolError(f"prompt too long: {length} bytes")
        raw = payload[6:6 + length]
        if len(raw) != length:
            raise ProtocolError("prompt payload size mismatch")
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"prompt not valid utf-8: {e}") from None
        return cls(chunk, text)


def hello_message(summary: dict) -> StreamMessage:
    return StreamMessage(HELLO, json.dumps(summary, sort_keys=True).encode())


def metrics_message(snapshot: dict) -> StreamMessage:
    return StreamMessage(METRICS, json.dumps(snapshot, sort_keys=True).encode())


def error_message(reason: str) -> StreamMessage:
    return StreamMessage(ERROR, reason.encode("utf-8"))


def frame_message(payload: FramePayload) -> StreamMessage:
    return StreamMessage(FRAME, payload.encode())


def prompt_update_message(payload: PromptUpdatePayload) -> StreamMessage:
    return StreamMessage(PROMPT_UPDATE, payload.encode())


def end_message() -> StreamMessage:
    return StreamMessage(END)
