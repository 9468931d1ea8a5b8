"""Allocation-event ledger.

Records every charge and release of tensor payload bytes as a signed delta
with a monotonically increasing tick, and tracks the running peak. What gets
charged (and when buffers are considered released) is the executor's
contract; see docs/memory-model.md for the full accounting rules.

Events are appended from a single thread; the pipelined executor funnels its
bookkeeping through the scheduling thread so event order is deterministic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass


@dataclass(frozen=True)
class LedgerEvent:
    tick: int
    delta: int
    tag: str


class MemoryLedger:
    def __init__(self):
        self.events: list[LedgerEvent] = []
        self.current_bytes = 0
        self.peak_bytes = 0
        self._tick = 0

    def alloc(self, nbytes: int, tag: str) -> None:
        if nbytes < 0:
            raise ValueError("alloc size must be non-negative")
        self._record(nbytes, tag)

    def free(self, nbytes: int, tag: str) -> None:
        if nbytes < 0:
            raise ValueError("free size must be non-negative")
        self._record(-nbytes, tag)

    def _record(self, delta: int, tag: str) -> None:
        self.current_bytes += delta
        if self.current_bytes < 0:
            raise AssertionError(f"ledger went negative at {tag!r}")
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        self.events.append(LedgerEvent(self._tick, delta, tag))
        self._tick += 1

    def assert_closed(self) -> None:
        if self.current_bytes != 0:
            raise AssertionError(f"ledger not balanced: {self.current_bytes} bytes still live")


def export_timeline(ledger: MemoryLedger) -> str:
    """CSV timeline of cumulative live bytes; the first peak row is flagged."""
    buf = io.StringIO()
    buf.write("tick,cumulative_bytes,tag,is_peak\n")
    running = 0
    flagged = False
    for ev in ledger.events:
        running += ev.delta
        peak = not flagged and running == ledger.peak_bytes and ledger.peak_bytes > 0
        if peak:
            flagged = True
        tag = ev.tag.replace('"', "'")
        if "," in tag:
            tag = f'"{tag}"'
        buf.write(f"{ev.tick},{running},{tag},{1 if peak else 0}\n")
    return buf.getvalue()
