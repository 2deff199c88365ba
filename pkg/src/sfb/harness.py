"""Experiment plumbing: communication accounting, synthetic data,
dataset files, gradient checking, and offline replay of batch logs.

The comm-cost formulas here are asserted exactly against measured
counters in the acceptance suite: with dense data, a full-broadcast
factor exchange moves P(P-1)K(J+D) float64 values per iteration,
partial broadcast moves PQK(J+D), and the client-server full-matrix
baseline moves 2PJD (one update matrix up and one parameter matrix
down per client).
"""

from __future__ import annotations

import csv
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, Sample, dml_sf, mlr_sf, solve_sparse_code
from .tensor import (
    ParamMatrix,
    SFBatch,
    SFPair,
    Vec64,
    frobenius_distance,
    materialize_update,
)

__all__ = [
    "CommCounters",
    "ReportRow",
    "RunReport",
    "expected_comm_values",
    "gen_synthetic",
    "save_dataset",
    "load_dataset",
    "finite_diff_check",
    "reconstruct_auxiliary",
    "write_report_csv",
]

REPORT_COLUMNS = ("iter", "wall_ms", "objective", "comm_values", "comm_bytes",
                  "max_disagreement")


class CommCounters:
    """Monotone totals of values/bytes/messages sent, per directed edge.

    Thread-safe: live transports record from concurrent sender threads.
    """

    def __init__(self):
        self.values_sent = 0
        self.bytes_sent = 0
        self.messages_sent = 0
        self.per_edge: dict[tuple[int, int], list[int]] = {}
        self._lock = threading.Lock()

    def record_send(self, src: int, dst: int, values: int, nbytes: int) -> None:
        with self._lock:
            self.values_sent += values
            self.bytes_sent += nbytes
            self.messages_sent += 1
            edge = self.per_edge.setdefault((src, dst), [0, 0, 0])
            edge[0] += values
            edge[1] += nbytes
            edge[2] += 1


@dataclass
class ReportRow:
    iter: int
    wall_ms: float
    objective: float
    comm_values: int
    comm_bytes: int
    max_disagreement: float


@dataclass
class RunReport:
    """Everything a finished run exposes for analysis.

    ``batch_log[p]`` holds worker p's committed batches in commit order;
    ``tau_trace[p][c-1]`` is the applied-clock snapshot (tracked peers
    plus self) at the moment worker p computed its c-th iteration.
    ``trajectory`` is only populated for lockstep runs that asked for it.
    """

    rows: list[ReportRow] = field(default_factory=list)
    counters: CommCounters = field(default_factory=CommCounters)
    final_matrices: list[ParamMatrix] = field(default_factory=list)
    batch_log: list[list[SFBatch]] = field(default_factory=list)
    tau_trace: list[list[dict[int, int]]] = field(default_factory=list)
    trajectory: list[ParamMatrix] = field(default_factory=list)
    gate_violations: int = 0
    initial_matrix: ParamMatrix | None = None
    model_kind: str = ""

    def all_batches(self) -> list[SFBatch]:
        out = [b for worker_batches in self.batch_log for b in worker_batches]
        out.sort(key=lambda b: (b.clock, b.sender))
        return out


def write_report_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in report.rows:
            writer.writerow([r.iter, f"{r.wall_ms:.3f}", repr(r.objective),
                             r.comm_values, r.comm_bytes, repr(r.max_disagreement)])


def expected_comm_values(mode: str, P: int, K: int, J: int, D: int,
                         Q: int | None = None) -> int:
    """Float64 values on the wire per iteration, dense-data accounting."""
    if mode == "sfb-full":
        return P * (P - 1) * K * (J + D)
    if mode == "sfb-halton":
        if Q is None:
            raise ValueError("halton accounting needs Q")
        return P * Q * K * (J + D)
    if mode == "fms":
        return 2 * P * J * D
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Synthetic data


def gen_synthetic(kind: str, J: int, D: int, N: int, seed: int,
                  noise: float = 0.1) -> list[Sample]:
    """Seeded synthetic dataset for one model family.

    mlr/l2mlr: J unit-norm class centers in R^D, points = center + noise.
    dml: feature differences of point pairs drawn from the same (similar)
    or different (dissimilar) centers.  sc: sparse nonnegative-free
    combinations of a random unit-column dictionary of size J plus noise.
    """
    rng = np.random.default_rng(seed)
    if kind in ("mlr", "l2mlr"):
        centers = rng.normal(size=(J, D))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        out = []
        for _ in range(N):
            y = int(rng.integers(J))
            x = centers[y] + noise * rng.normal(size=D)
            out.append(Sample(a=Vec64.dense(x), class_id=y))
        return out
    if kind == "dml":
        n_centers = max(2, J)
        centers = rng.normal(size=(n_centers, D))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        out = []
        for _ in range(N):
            similar = bool(rng.random() < 0.5)
            if similar:
                c = int(rng.integers(n_centers))
                x1 = centers[c] + noise * rng.normal(size=D)
                x2 = centers[c] + noise * rng.normal(size=D)
            else:
                c1 = int(rng.integers(n_centers))
                c2 = int((c1 + 1 + rng.integers(n_centers - 1)) % n_centers)
                x1 = centers[c1] + noise * rng.normal(size=D)
                x2 = centers[c2] + noise * rng.normal(size=D)
            out.append(Sample(a=Vec64.dense(x1 - x2), similar=similar))
        return out
    if kind == "sc":
        dictionary = rng.normal(size=(D, J))
        dictionary /= np.linalg.norm(dictionary, axis=0, keepdims=True)
        k0 = max(1, J // 8)
        out = []
        for _ in range(N):
            support = rng.choice(J, size=k0, replace=False)
            code = np.zeros(J)
            code[support] = rng.normal(size=k0)
            x = dictionary @ code + noise * 0.1 * rng.normal(size=D)
            out.append(Sample(a=Vec64.dense(x)))
        return out
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# Dataset files (LIBSVM-style text, 0-based indices)


def _sample_label(kind: str, s: Sample) -> str:
    if kind in ("mlr", "l2mlr"):
        return str(s.class_id)
    if kind == "dml":
        return "1" if s.similar else "-1"
    return "0"  # sc: label ignored


def save_dataset(samples: list[Sample], path, kind: str) -> None:
    """Write `<label> <idx>:<val> ...` lines; zero entries are omitted."""
    with open(path, "w") as fh:
        for s in samples:
            if s.a.is_sparse:
                idx, val = s.a.indices, s.a.sparse_values
            else:
                idx = np.nonzero(s.a.dense_values)[0]
                val = s.a.dense_values[idx]
            feats = " ".join(f"{int(i)}:{float(x)!r}" for i, x in zip(idx, val))
            fh.write(f"{_sample_label(kind, s)} {feats}".rstrip() + "\n")


def load_dataset(path, kind: str, dim: int) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            label = fields[0]
            idx, val = [], []
            for tok in fields[1:]:
                i, x = tok.split(":")
                idx.append(int(i))
                val.append(float(x))
            a = Vec64.sparse(dim, idx, val)
            if kind in ("mlr", "l2mlr"):
                out.append(Sample(a=a, class_id=int(label)))
            elif kind == "dml":
                out.append(Sample(a=a, similar=int(label) > 0))
            else:
                out.append(Sample(a=a))
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def _per_sample_loss(spec: ModelSpec, s: Sample, frozen_code: np.ndarray | None):
    """The scalar loss f(W a) used for gradient checks (no regularizer)."""
    if spec.kind in ("mlr", "l2mlr"):

        def loss(W: ParamMatrix) -> float:
            logits = W.matvec(s.a)
            m = logits.max()
            return float(m + np.log(np.exp(logits - m).sum()) - logits[s.class_id])

        return loss
    if spec.kind == "dml":

        def loss(W: ParamMatrix) -> float:
            z = W.matvec(s.a)
            sq = float(z @ z)
            return sq if s.similar else max(0.0, spec.margin - sq)

        return loss
    if spec.kind == "sc":
        if frozen_code is None:
            raise ValueError("sc gradient check needs a frozen code")

        def loss(B: ParamMatrix) -> float:
            r = B.values @ frozen_code - s.a.to_dense()
            return float(0.5 * (r @ r))

        return loss
    raise ValueError(spec.kind)


def finite_diff_check(spec: ModelSpec, W: ParamMatrix, s: Sample,
                      eps: float = 1e-6) -> float:
    """Max abs deviation between the factor outer product and the
    central-difference gradient of the per-sample loss, over all entries.

    For sc the sample's code is solved once and frozen, matching the
    pair's v factor; a hinge-inactive dml pair is checked against the
    zero matrix.
    """
    frozen_code = None
    if spec.kind in ("mlr", "l2mlr"):
        pair = mlr_sf(W, s)
    elif spec.kind == "dml":
        pair = dml_sf(W, s, spec.margin)
    else:
        frozen_code = solve_sparse_code(W, s.a, spec.lam, spec.sc_max_iters, spec.sc_tol)
        u = W.values @ frozen_code - s.a.to_dense()
        pair = SFPair(u=Vec64.dense(u), v=Vec64.dense(frozen_code))

    if pair is None:
        grad = np.zeros((W.rows, W.cols))
    else:
        grad = materialize_update(
            SFBatch(pairs=[pair], coeff=1.0, sender=0, clock=1)
        ).values

    loss = _per_sample_loss(spec, s, frozen_code)
    worst = 0.0
    work = W.copy()
    for i in range(W.rows):
        for j in range(W.cols):
            orig = work.values[i, j]
            work.values[i, j] = orig + eps
            hi = loss(work)
            work.values[i, j] = orig - eps
            lo = loss(work)
            work.values[i, j] = orig
            fd = (hi - lo) / (2.0 * eps)
            worst = max(worst, abs(fd - grad[i, j]))
    return worst


# ---------------------------------------------------------------------------
# Batch log files: one length-prefixed encoded message per committed batch


def write_sflog(path, batches: list[SFBatch], model_id: int) -> None:
    from .transport import SFMessage, encode

    with open(path, "ab") as fh:
        for b in batches:
            payload = encode(SFMessage(sender=b.sender, clock=b.clock,
                                       model_id=model_id, coeff=b.coeff,
                                       pairs=b.pairs))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_sflog(path) -> list[SFBatch]:
    from .transport import decode

    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated log record length")
            (n,) = struct.unpack("<I", head)
            payload = fh.read(n)
            if len(payload) != n:
                raise ValueError("truncated log record")
            msg = decode(payload)
            out.append(SFBatch(pairs=msg.pairs, coeff=msg.coeff,
                               sender=msg.sender, clock=msg.clock))
    return out


def dump_run_logs(report: RunReport, out_dir) -> None:
    """Write each worker's committed batches to `<out>/worker_<p>.sflog`."""
    import os

    from .engine import MODEL_IDS  # local import avoids a cycle

    os.makedirs(out_dir, exist_ok=True)
    model_id = MODEL_IDS.get(report.model_kind, 0)
    for p, batches in enumerate(report.batch_log):
        write_sflog(os.path.join(out_dir, f"worker_{p}.sflog"), batches, model_id)


# ---------------------------------------------------------------------------
# Offline replay of batch logs


@dataclass
class AuxiliaryReplay:
    """Replayed global sequence and per-worker disagreement series.

    ``auxiliary[c]`` accumulates every batch with clock <= c-1 (the state
    all workers would share with no delay).  ``disagreement[c][p]`` is
    the Frobenius distance to worker p's replayed view, derived from the
    run's applied-clock snapshots; ``pending_bound[c][p]`` is the sum of
    the materialized norms of the batches p had not yet applied, an upper
    bound on that disagreement.
    """

    checkpoints: list[int]
    auxiliary: dict[int, ParamMatrix]
    disagreement: dict[int, dict[int, float]]
    pending_bound: dict[int, dict[int, float]]
    pending_count: dict[int, dict[int, int]]

    def max_disagreement(self, c: int) -> float:
        return max(self.disagreement[c].values())


def _replay_upto(W0: ParamMatrix, batches: list[SFBatch], limits: dict[int, int]) -> ParamMatrix:
    W = W0.copy()
    for b in batches:
        if b.clock <= limits.get(b.sender, 0) and b.pairs:
            W.values += materialize_update(b).values
    return W


def reconstruct_auxiliary(batch_log: list[list[SFBatch]], W0: ParamMatrix,
                          tau_trace: list[list[dict[int, int]]],
                          checkpoints: list[int]) -> AuxiliaryReplay:
    """Rebuild the no-delay global sequence and each worker's lagged view.

    Consumes only a run's committed-batch log plus its applied-clock
    snapshots; works identically for lockstep, bounded-stale, and fully
    asynchronous runs.  Checkpoint c means "the state used to compute
    iteration c": batches with clock <= c-1 for the global sequence,
    clock <= tau_p^q(c) per sender for worker p's view.
    """
    P = len(batch_log)
    batches = sorted((b for wb in batch_log for b in wb), key=lambda b: (b.clock, b.sender))
    norms = {
        (b.sender, b.clock): (
            float(np.linalg.norm(materialize_update(b).values)) if b.pairs else 0.0
        )
        for b in batches
    }
    out = AuxiliaryReplay(list(checkpoints), {}, {}, {}, {})
    for c in checkpoints:
        aux_limits = {p: c - 1 for p in range(P)}
        aux = _replay_upto(W0, batches, aux_limits)
        out.auxiliary[c] = aux
        out.disagreement[c] = {}
        out.pending_bound[c] = {}
        out.pending_count[c] = {}
        for p in range(P):
            if c - 1 >= len(tau_trace[p]):
                raise ValueError(f"worker {p} committed fewer than {c} iterations")
            snap = tau_trace[p][c - 1]
            limits = {q: snap.get(q, c - 1 if q == p else 0) for q in range(P)}
            local = _replay_upto(W0, batches, limits)
            out.disagreement[c][p] = frobenius_distance(aux, local)
            pend = [b for b in batches
                    if limits.get(b.sender, 0) < b.clock <= c - 1]
            out.pending_bound[c][p] = sum(norms[(b.sender, b.clock)] for b in pend)
            out.pending_count[c][p] = len(pend)
    return out
