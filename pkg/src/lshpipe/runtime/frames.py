"""Envelope wire format shared by both transports.

Each envelope serializes to one self-delimiting little-endian frame:

    offset  size  field
    0       4     frame length (bytes that follow, = 22 + payload length)
    4       2     stream id
    6       8     tag
    14      4     source copy id
    18      8     per-(src copy, dst copy, stream) sequence number
    26      ...   payload bytes

An aggregated transport message is a concatenation of frames; receivers can
re-segment the byte stream without outer framing.
"""

from __future__ import annotations

import struct

_HEAD = struct.Struct("<IHQIQ")
HEADER_BYTES = _HEAD.size  # 26: 4-byte length + 22 bytes of routing fields
FIXED_AFTER_LENGTH = HEADER_BYTES - 4

# In-memory envelopes are plain tuples in this field order.
STREAM, TAG, SRC, SEQ, PAYLOAD = range(5)


def encode_envelope(stream_id: int, tag: int, src_copy: int, seq: int, payload: bytes) -> bytes:
    return _HEAD.pack(FIXED_AFTER_LENGTH + len(payload), stream_id, tag, src_copy, seq) + payload


def encode_batch(envelopes) -> bytes:
    return b"".join(
        _HEAD.pack(FIXED_AFTER_LENGTH + len(e[PAYLOAD]), e[STREAM], e[TAG], e[SRC], e[SEQ]) + e[PAYLOAD]
        for e in envelopes
    )


class FrameParser:
    """Incremental parser turning a byte stream back into envelope tuples."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple]:
        self._buf.extend(data)
        out = []
        buf = self._buf
        pos = 0
        n = len(buf)
        while n - pos >= HEADER_BYTES:
            length, stream_id, tag, src, seq = _HEAD.unpack_from(buf, pos)
            end = pos + 4 + length
            if end > n:
                break
            payload = bytes(buf[pos + HEADER_BYTES : end])
            out.append((stream_id, tag, src, seq, payload))
            pos = end
        if pos:
            del buf[:pos]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
