"""Vector-clock bookkeeping and the bounded-staleness gate.

Each worker tracks its own commit count and, per peer it receives from,
the highest iteration applied.  A worker may start its next iteration
only while no tracked peer is more than ``staleness`` iterations behind
its own commits; staleness 0 is lockstep BSP and infinity is fully
asynchronous.
"""

from __future__ import annotations

import math

__all__ = ["FifoViolation", "ClockTable", "ASYNC"]

ASYNC = math.inf


class FifoViolation(RuntimeError):
    """A peer's clock went backwards: the transport broke FIFO order."""


class ClockTable:
    """Commit/apply clocks for one worker.

    ``applied[q]`` counts whole committed iterations received from peer
    q and applied locally; it never decreases.  Only peers in the
    worker's receive set are tracked (under partial broadcast a worker
    cannot observe senders that never reach it).
    """

    __slots__ = ("worker_id", "commits", "applied")

    def __init__(self, worker_id: int, peer_ids):
        self.worker_id = worker_id
        self.commits = 0
        self.applied = {int(q): 0 for q in peer_ids}
        if worker_id in self.applied:
            raise ValueError("a worker does not track itself")

    def may_proceed(self, staleness: float) -> bool:
        """True iff every tracked peer is within ``staleness`` iterations."""
        if staleness == ASYNC:
            return True
        return all(self.commits - a <= staleness for a in self.applied.values())

    def max_lag(self) -> int:
        if not self.applied:
            return 0
        return self.commits - min(self.applied.values())

    def record_commit(self) -> int:
        self.commits += 1
        return self.commits

    def record_applied(self, sender: int, upto_clock: int) -> None:
        if sender not in self.applied:
            raise ValueError(f"worker {self.worker_id} does not track peer {sender}")
        if upto_clock < self.applied[sender]:
            raise FifoViolation(
                f"peer {sender} clock moved {self.applied[sender]} -> {upto_clock}"
            )
        self.applied[sender] = upto_clock

    def snapshot(self) -> dict[int, int]:
        return dict(self.applied)
