"""Session accounting: every frame, every byte, and the op-level events.

A round is one frame in either direction, so both parties end a session with
the same round count.  Byte attribution is recorded where the payloads are
built: the garbled-circuit material moved during stages (tables, labels,
pad pairs, derandomization bits) is tallied separately from ciphertext
traffic so transfer comparisons between modes measure what they claim to.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .framing import FRAME_NAMES


@dataclass(frozen=True)
class FrameInfo:
    seq: int
    direction: str  # "sent" | "received"
    ftype: int
    nbytes: int     # payload bytes

    @property
    def name(self) -> str:
        return FRAME_NAMES[self.ftype]


@dataclass
class Transcript:
    role: str
    frames: list[FrameInfo] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    gc_online_bytes: int = 0
    counters: dict = field(default_factory=dict)
    _digest: "hashlib._Hash" = field(default_factory=lambda: hashlib.sha256(),
                                     repr=False)

    @property
    def rounds(self) -> int:
        return len(self.frames)

    @property
    def bytes_sent(self) -> int:
        return sum(f.nbytes for f in self.frames if f.direction == "sent")

    @property
    def bytes_received(self) -> int:
        return sum(f.nbytes for f in self.frames if f.direction == "received")

    def record(self, direction: str, ftype: int, payload: bytes):
        self.frames.append(FrameInfo(len(self.frames), direction, ftype,
                                     len(payload)))
        self._digest.update(bytes([ftype]))
        self._digest.update(len(payload).to_bytes(4, "little"))
        self._digest.update(payload)

    def add_gc_bytes(self, n: int):
        self.gc_online_bytes += n

    def add_event(self, **fields):
        self.events.append(dict(fields))

    def digest(self) -> str:
        """Order-sensitive hash of every frame seen; two transports carrying
        the same session produce the same digest."""
        return self._digest.hexdigest()

    def frames_of(self, *ftypes: int) -> list[FrameInfo]:
        return [f for f in self.frames if f.ftype in ftypes]

    def events_of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e.get("kind") == kind]
