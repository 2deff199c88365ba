"""Broadcast target sets: full mesh or Halton-sequence partial broadcast.

Under partial broadcast, worker p sends to Q peers at the offsets
floor(P/2), floor(P/4), floor(3P/4), floor(P/8), floor(3P/8), ...
(the base-2 low-discrepancy sequence scaled by P), taken modulo P.
Offsets that collapse to zero at small P are skipped and the sequence
extended until Q distinct targets are found.  Worker ids are 0-based
internally; displays add 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "Topology",
    "targets",
    "in_neighbors",
    "default_fanout",
    "halton_offsets",
    "is_strongly_connected",
]


def default_fanout(workers: int) -> int:
    """Q = max(1, ceil(log2 P)), the usual log-scale fan-out."""
    return max(1, math.ceil(math.log2(workers)))


@dataclass(frozen=True)
class Topology:
    kind: str  # "full" | "halton"
    workers: int
    fanout: int | None = None  # Q, halton only

    def __post_init__(self):
        if self.kind not in ("full", "halton"):
            raise ValueError(f"unknown topology {self.kind!r}")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.kind == "halton":
            q = self.fanout if self.fanout is not None else default_fanout(self.workers)
            if not (1 <= q <= self.workers - 1):
                raise ValueError(f"fanout {q} not in [1, {self.workers - 1}]")

    @property
    def q(self) -> int:
        if self.kind != "halton":
            return self.workers - 1
        return self.fanout if self.fanout is not None else default_fanout(self.workers)


def halton_offsets(workers: int):
    """Yield floor(j*P / 2^level) for level = 1, 2, ... and odd j."""
    level = 1
    while level < 70:
        denom = 1 << level
        for j in range(1, denom, 2):
            yield (j * workers) // denom
        level += 1
    raise AssertionError("offset sequence exhausted")  # pragma: no cover


def targets(top: Topology, p: int) -> list[int]:
    """Ordered broadcast targets of worker p (self excluded)."""
    P = top.workers
    if not (0 <= p < P):
        raise ValueError(f"worker id {p} out of range")
    if top.kind == "full":
        return [q for q in range(P) if q != p]
    out: list[int] = []
    seen = set()
    for off in halton_offsets(P):
        if off == 0:
            continue  # degenerate at small P; extend the walk
        q = (p + off) % P
        if q == p or q in seen:
            continue
        seen.add(q)
        out.append(q)
        if len(out) == top.q:
            return out
    raise AssertionError("unreachable")  # pragma: no cover


def in_neighbors(top: Topology, p: int) -> list[int]:
    """Workers whose broadcasts reach p (the gate's receive set)."""
    if top.kind == "full":
        return [q for q in range(top.workers) if q != p]
    # Offsets are id-independent, so q -> q + off hits p iff q = p - off.
    offs = targets(top, 0)
    return sorted({(p - off) % top.workers for off in offs})


def is_strongly_connected(top: Topology) -> bool:
    """BFS check that every worker can reach every other."""
    P = top.workers
    if P == 1:
        return True
    adj = [targets(top, p) for p in range(P)]
    for start in range(P):
        seen = {start}
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        if len(seen) != P:
            return False
    return True
