"""Worker runtime and cluster drivers.

Each iteration a worker: checks the staleness gate, samples a minibatch
from its shard, turns the samples into factor pairs via its model
plugin, commits the batch (broadcast to its targets plus itself through
one shared apply path), then drains and applies whatever has arrived,
finishing with the model's proximal operator.

Batch coefficients fold everything receivers must not need to know:
-eta_c * |S_p| / K for the gradient models (learning rate, unbiasedness
weight of the shard, minibatch average, descent sign) and -1 for dual
ascent, whose scaling is pre-absorbed into the emitted factors.

Two drivers exist: a single-threaded deterministic simulator (default;
identical config and seed give identical runs, byte for byte) and a
threaded TCP driver for live, loopback or distributed meshes.  Worker 0
evaluates the objective on the full dataset every ``obj_every``
iterations and its parameter copy anchors the disagreement column.
"""

from __future__ import annotations

import collections
import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .consistency import ASYNC, ClockTable
from .harness import CommCounters, ReportRow, RunReport
from .models import (
    ModelSpec,
    Sample,
    SdcaState,
    dml_sf,
    mlr_sf,
    objective,
    sc_prox,
    sc_sf,
    sdca_l2mlr_step,
)
from .tensor import (
    DimensionMismatch,
    ParamMatrix,
    SFBatch,
    apply_sf_batch,
    frobenius_distance,
)
from .topology import Topology, in_neighbors, targets
from .transport import DelaySchedule, SFMessage, SimNetwork, TcpMesh, TransportError

__all__ = [
    "MODEL_IDS",
    "LrSchedule",
    "lr",
    "ExperimentConfig",
    "Worker",
    "make_workers",
    "compute_batch",
    "run_iteration",
    "apply_pending",
    "run_cluster",
    "DivergenceError",
    "DeadlockError",
]

log = logging.getLogger(__name__)

MODEL_IDS = {"mlr": 0, "l2mlr": 1, "dml": 2, "sc": 3}

# Abort once any parameter magnitude passes this; fully asynchronous
# runs can diverge and should fail loudly rather than overflow.
DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    """Constant rate, or the staleness-aware decaying rate
    1 / (L_F/2 + 2 s L + sqrt(c)) that keeps bounded-stale runs'
    parameter copies contracting toward each other."""

    kind: str = "constant"  # "constant" | "theorem"
    eta: float = 0.1
    l_f: float = 1.0
    l_sum: float = 1.0
    staleness: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "theorem"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "constant" and self.eta <= 0:
            raise ValueError("constant rate must be > 0")
        if self.kind == "theorem":
            if self.l_f < 0 or self.l_sum < 0:
                raise ValueError("Lipschitz constants must be >= 0")
            if self.staleness == ASYNC and self.l_sum > 0:
                raise ValueError("decaying schedule needs finite staleness")


def lr(sched: LrSchedule, c: int) -> float:
    """Learning rate at (0-based) iteration c."""
    if sched.kind == "constant":
        return sched.eta
    return 1.0 / (sched.l_f / 2.0 + 2.0 * sched.staleness * sched.l_sum + math.sqrt(c))


@dataclass
class ExperimentConfig:
    spec: ModelSpec
    data: list[Sample]
    workers: int = 4
    staleness: float = 0.0
    topology: Topology | None = None
    minibatch: int = 1
    lr_sched: LrSchedule = field(default_factory=LrSchedule)
    iters: int = 100
    obj_every: int = 10
    sync: str = "sfb"
    transport: str = "sim"
    seed: int = 0
    delays: DelaySchedule | None = None
    peers: dict[int, tuple[str, int]] | None = None
    capture_trajectory: bool = False
    post_apply_hook: object = None  # callable(worker_id, ParamMatrix) or None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if not self.data:
            raise ValueError("empty dataset")
        if len(self.data) < self.workers:
            raise ValueError("every worker needs a nonempty shard")
        if self.minibatch < 1:
            raise ValueError("minibatch size must be >= 1")
        if self.iters < 1:
            raise ValueError("need at least one iteration")
        if self.staleness != ASYNC and self.staleness < 0:
            raise ValueError("staleness must be >= 0 or inf")
        if self.sync not in ("sfb", "fms"):
            raise ValueError(f"unknown sync mode {self.sync!r}")
        if self.transport not in ("sim", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.topology is None:
            self.topology = Topology("full", self.workers)
        if self.topology.workers != self.workers:
            raise ValueError("topology sized for a different worker count")
        if self.capture_trajectory and (
            self.staleness != 0 or self.topology.kind != "full"
        ):
            raise ValueError("trajectory capture requires lockstep full broadcast")


class Worker:
    """One worker's whole state; see the module docstring for the loop."""

    def __init__(self, wid: int, spec: ModelSpec, shard: list[Sample],
                 matrix: ParamMatrix, clock: ClockTable, rng: np.random.Generator,
                 minibatch: int, lr_sched: LrSchedule, staleness: float,
                 n_total: int, sdca: SdcaState | None = None):
        self.wid = wid
        self.spec = spec
        self.shard = shard
        self.matrix = matrix  # primal W, or the auxiliary Z under dual ascent
        self.sdca = sdca
        self.clock = clock
        self.rng = rng
        self.minibatch = minibatch
        self.lr_sched = lr_sched
        self.staleness = staleness
        self.n_total = n_total
        self.self_applied = 0
        self.batch_log: list[SFBatch] = []
        self.tau_trace: list[dict[int, int]] = []
        self.gate_violations = 0
        self.input_q: collections.deque[SFBatch] = collections.deque()
        # live-mode coordination; unused by the simulator
        self.cond = threading.Condition()
        self.mat_lock = threading.Lock()
        self.error: BaseException | None = None

    @property
    def shard_size(self) -> int:
        return len(self.shard)

    def primal(self) -> ParamMatrix:
        """The matrix model code should read (W = Z/lam under dual ascent)."""
        if self.sdca is not None:
            return self.sdca.primal()
        return self.matrix

    def gate_ok(self) -> bool:
        # Own commits must be applied before the next compute; remote
        # peers are bounded by the staleness gate.
        return (self.self_applied == self.clock.commits
                and self.clock.may_proceed(self.staleness))


def _init_matrix(spec: ModelSpec, rng: np.random.Generator) -> ParamMatrix:
    """Common initializer shared by every worker (and the baseline)."""
    if spec.kind in ("mlr", "l2mlr"):
        return ParamMatrix.zeros(spec.rows, spec.cols)
    if spec.kind == "dml":
        return ParamMatrix(rng.normal(size=(spec.rows, spec.cols)) / math.sqrt(spec.cols))
    # sc: random dictionary with unit-norm columns (feasible start)
    B = rng.normal(size=(spec.rows, spec.cols))
    B /= np.linalg.norm(B, axis=0, keepdims=True)
    return ParamMatrix(B)


def make_workers(cfg: ExperimentConfig) -> list[Worker]:
    """Shard the data round-robin and build identically-initialized workers.

    RNG streams are spawned from the config seed per worker id, so any
    run (or the full-matrix baseline) with the same seed draws the same
    minibatches.
    """
    P = cfg.workers
    seeds = np.random.SeedSequence(cfg.seed).spawn(P + 1)
    init_rng = np.random.default_rng(seeds[P])
    w0 = _init_matrix(cfg.spec, init_rng)
    workers = []
    for p in range(P):
        shard = cfg.data[p::P]
        sdca = None
        matrix = w0.copy()
        if cfg.spec.uses_dual_ascent:
            sdca = SdcaState.fresh(cfg.spec.rows, cfg.spec.cols, len(shard), cfg.spec.lam)
            sdca.z = matrix  # Z aliases the apply target; W stays derived
        clock = ClockTable(p, in_neighbors(cfg.topology, p))
        workers.append(Worker(
            wid=p, spec=cfg.spec, shard=shard, matrix=matrix, clock=clock,
            rng=np.random.default_rng(seeds[p]), minibatch=cfg.minibatch,
            lr_sched=cfg.lr_sched, staleness=cfg.staleness,
            n_total=len(cfg.data), sdca=sdca,
        ))
    return workers


def compute_batch(w: Worker, c: int) -> SFBatch:
    """Factor pairs for one minibatch at schedule counter c (0-based).

    Consumes exactly one RNG draw, so independent replays stay aligned.
    """
    idxs = w.rng.integers(0, len(w.shard), size=w.minibatch)
    pairs = []
    if w.spec.uses_dual_ascent:
        for i in idxs:
            pairs.append(sdca_l2mlr_step(
                w.sdca, w.shard[i], int(i), w.spec.sdca_theta, w.n_total))
        coeff = -1.0
    else:
        W = w.matrix
        for i in idxs:
            s = w.shard[i]
            if w.spec.kind == "mlr":
                pairs.append(mlr_sf(W, s))
            elif w.spec.kind == "dml":
                pair = dml_sf(W, s, w.spec.margin)
                if pair is not None:  # inactive hinge: nothing worth sending
                    pairs.append(pair)
            else:
                pairs.append(sc_sf(W, s, w.spec.lam, w.spec.sc_max_iters, w.spec.sc_tol))
        # nominal K in the average even when hinge-inactive pairs dropped out
        coeff = -lr(w.lr_sched, c) * w.shard_size / w.minibatch
    return SFBatch(pairs=pairs, coeff=coeff, sender=w.wid, clock=w.clock.commits + 1)


def run_iteration(w: Worker) -> SFBatch:
    """Compute and commit one batch; caller handles broadcast/self-apply."""
    if w.clock.max_lag() > w.staleness:
        w.gate_violations += 1  # the gate should have blocked us
    c = w.clock.commits
    batch = compute_batch(w, c)
    snap = w.clock.snapshot()
    snap[w.wid] = c  # own updates applied through c at compute time
    w.tau_trace.append(snap)
    w.clock.record_commit()
    w.batch_log.append(batch)
    return batch


def _guard_finite(w: Worker) -> None:
    v = w.matrix.values
    if not np.isfinite(v).all() or np.abs(v).max() > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"worker {w.wid} diverged at iteration {w.clock.commits}"
        )


def apply_pending(w: Worker, live: bool = False, hook=None) -> int:
    """Drain the input queue and apply everything, then prox once.

    Batches are applied in (clock, sender) order within the drain so
    replicas that drain the same set produce the same matrix.  In live
    mode malformed batches are logged and dropped (their clock still
    advances, or the gate would wedge); in simulator mode they raise.
    """
    drained = []
    while w.input_q:
        drained.append(w.input_q.popleft())
    if not drained:
        return 0
    drained.sort(key=lambda b: (b.clock, b.sender))
    applied = 0
    for batch in drained:
        try:
            apply_sf_batch(w.matrix, batch)
        except DimensionMismatch:
            if not live:
                raise
            log.warning("worker %d: dropping mis-shaped batch from %d",
                        w.wid, batch.sender)
        if batch.sender == w.wid:
            w.self_applied = batch.clock
        else:
            w.clock.record_applied(batch.sender, batch.clock)
        applied += 1
    if applied:
        if w.spec.kind == "sc":
            sc_prox(w.matrix)
        _guard_finite(w)
        if hook is not None:
            hook(w.wid, w.matrix)
    return applied


def _batch_to_message(spec: ModelSpec, batch: SFBatch) -> SFMessage:
    return SFMessage(sender=batch.sender, clock=batch.clock,
                     model_id=MODEL_IDS[spec.kind], coeff=batch.coeff,
                     pairs=batch.pairs)


def _message_to_batch(spec: ModelSpec, msg: SFMessage, live: bool) -> SFBatch | None:
    if msg.model_id != MODEL_IDS[spec.kind]:
        if live:
            log.warning("dropping batch for foreign model id %d", msg.model_id)
            return None
        raise ValueError(f"batch for foreign model id {msg.model_id}")
    return SFBatch(pairs=msg.pairs, coeff=msg.coeff, sender=msg.sender,
                   clock=msg.clock)


def run_cluster(cfg: ExperimentConfig) -> RunReport:
    """Run the experiment described by ``cfg`` and return its report."""
    if cfg.sync == "fms":
        from . import fms  # local import: fms builds on this module

        return fms.run_fms(cfg)
    workers = make_workers(cfg)
    if cfg.transport == "sim":
        return _run_sim(cfg, workers)
    return _run_tcp(cfg, workers)


def _finish_report(cfg: ExperimentConfig, workers: list[Worker],
                   report: RunReport, t0: float, w0_init: ParamMatrix) -> RunReport:
    report.final_matrices = [w.matrix.copy() for w in workers]
    report.batch_log = [w.batch_log for w in workers]
    report.tau_trace = [w.tau_trace for w in workers]
    report.gate_violations = sum(w.gate_violations for w in workers)
    report.initial_matrix = w0_init
    report.model_kind = cfg.spec.kind
    obj = objective(cfg.spec, workers[0].primal(), cfg.data)
    dis = max(frobenius_distance(workers[0].matrix, w.matrix) for w in workers)
    report.rows.append(ReportRow(
        iter=cfg.iters, wall_ms=(time.perf_counter() - t0) * 1e3, objective=obj,
        comm_values=report.counters.values_sent, comm_bytes=report.counters.bytes_sent,
        max_disagreement=dis,
    ))
    return report


def _maybe_row(cfg: ExperimentConfig, workers: list[Worker], report: RunReport,
               t0: float, locked: bool = False) -> None:
    t = workers[0].clock.commits
    if t % cfg.obj_every != 0 or t >= cfg.iters:
        return
    if locked:
        with workers[0].mat_lock:
            obj = objective(cfg.spec, workers[0].primal(), cfg.data)
            ref = workers[0].matrix.copy()
        dis = 0.0
        for w in workers[1:]:
            with w.mat_lock:
                dis = max(dis, frobenius_distance(ref, w.matrix))
    else:
        obj = objective(cfg.spec, workers[0].primal(), cfg.data)
        dis = max(frobenius_distance(workers[0].matrix, w.matrix) for w in workers)
    report.rows.append(ReportRow(
        iter=t, wall_ms=(time.perf_counter() - t0) * 1e3, objective=obj,
        comm_values=report.counters.values_sent, comm_bytes=report.counters.bytes_sent,
        max_disagreement=dis,
    ))


def _run_sim(cfg: ExperimentConfig, workers: list[Worker]) -> RunReport:
    report = RunReport()
    net = SimNetwork(range(cfg.workers), cfg.delays or DelaySchedule(),
                     counters=report.counters)
    out_edges = [targets(cfg.topology, p) for p in range(cfg.workers)]
    w0_init = workers[0].matrix.copy()
    t0 = time.perf_counter()
    boundary = 0
    max_steps = _step_budget(cfg)
    for _ in range(max_steps):
        progress = False
        for src, dst, msg in net.step():
            batch = _message_to_batch(cfg.spec, msg, live=False)
            workers[dst].input_q.append(batch)
            progress = True
        for w in workers:
            if apply_pending(w, hook=cfg.post_apply_hook):
                progress = True
            if w.clock.commits < cfg.iters and w.gate_ok():
                batch = run_iteration(w)
                msg = _batch_to_message(cfg.spec, batch)
                for tgt in out_edges[w.wid]:
                    net.send(w.wid, tgt, msg)
                w.input_q.append(batch)
                progress = True
                if w.wid == 0:
                    _maybe_row(cfg, workers, report, t0)
        if cfg.capture_trajectory:
            boundary = _capture(workers[0], report, boundary)
        done = all(w.clock.commits >= cfg.iters for w in workers)
        idle = net.pending() == 0 and all(not w.input_q for w in workers)
        if done and idle:
            return _finish_report(cfg, workers, report, t0, w0_init)
        if not progress and idle:
            blocked = [w.wid for w in workers if w.clock.commits < cfg.iters]
            raise DeadlockError(f"no progress possible; blocked workers {blocked}")
    raise DeadlockError(f"run exceeded {max_steps} simulator steps")


def _step_budget(cfg: ExperimentConfig) -> int:
    delay_bound = 1
    if cfg.delays is not None:
        delay_bound += (cfg.delays.max_delay or 0) + cfg.delays.fixed
        if cfg.delays.per_edge:
            for queue in cfg.delays.per_edge.values():
                delay_bound = max(delay_bound, max(queue, default=0))
    return 16 * cfg.iters * delay_bound + 64


def _capture(w0: Worker, report: RunReport, boundary: int) -> int:
    """Record worker 0's matrix at each fully-applied iteration boundary."""
    frontier = min([w0.self_applied, *w0.clock.applied.values()]) \
        if w0.clock.applied else w0.self_applied
    while boundary < frontier:
        boundary += 1
        report.trajectory.append(w0.matrix.copy())
    return boundary


# ---------------------------------------------------------------------------
# Live TCP driver


def _run_tcp(cfg: ExperimentConfig, workers: list[Worker]) -> RunReport:
    report = RunReport()
    w0_init = workers[0].matrix.copy()
    out_edges = [targets(cfg.topology, p) for p in range(cfg.workers)]
    meshes: list[TcpMesh] = []
    for w in workers:
        def deliver(msg, w=w):
            batch = _message_to_batch(cfg.spec, msg, live=True)
            if batch is None:
                return
            with w.cond:
                w.input_q.append(batch)
                w.cond.notify_all()

        meshes.append(TcpMesh(w.wid, deliver, counters=report.counters))
    if cfg.peers is not None:
        addresses = dict(cfg.peers)
    else:
        addresses = {w.wid: meshes[w.wid].address for w in workers}
    for w in workers:
        meshes[w.wid].start_accepting(len(in_neighbors(cfg.topology, w.wid)))
    for w in workers:
        meshes[w.wid].connect({t: addresses[t] for t in out_edges[w.wid]})

    t0 = time.perf_counter()
    barrier = threading.Barrier(cfg.workers, timeout=120.0)

    def worker_loop(w: Worker) -> None:
        mesh = meshes[w.wid]
        out_q: collections.deque = collections.deque()
        out_ready = threading.Condition()
        send_err: list[BaseException] = []

        def sender_loop():
            while True:
                with out_ready:
                    while not out_q:
                        out_ready.wait()
                    item = out_q.popleft()
                if item is None:
                    return
                msg, tgts = item
                try:
                    for tgt in tgts:
                        mesh.send(tgt, msg)
                except TransportError as exc:
                    send_err.append(exc)
                    return

        sender = threading.Thread(target=sender_loop, daemon=True)
        sender.start()
        try:
            while w.clock.commits < cfg.iters:
                if send_err:
                    raise send_err[0]
                with w.mat_lock:
                    apply_pending(w, live=True, hook=cfg.post_apply_hook)
                if w.gate_ok():
                    with w.mat_lock:
                        batch = run_iteration(w)
                    msg = _batch_to_message(cfg.spec, batch)
                    if out_edges[w.wid]:
                        with out_ready:
                            out_q.append((msg, out_edges[w.wid]))
                            out_ready.notify()
                    with w.cond:
                        w.input_q.append(batch)
                    if w.wid == 0:
                        _maybe_row(cfg, workers, report, t0, locked=True)
                else:
                    with w.cond:
                        if not w.input_q:
                            w.cond.wait(timeout=0.05)
            # drain: every tracked peer's final batch plus our own
            deadline = time.monotonic() + 60.0
            while (w.self_applied < cfg.iters
                   or any(a < cfg.iters for a in w.clock.applied.values())):
                with w.mat_lock:
                    apply_pending(w, live=True, hook=cfg.post_apply_hook)
                if (w.self_applied >= cfg.iters
                        and all(a >= cfg.iters for a in w.clock.applied.values())):
                    break
                if time.monotonic() > deadline:
                    raise TransportError(f"worker {w.wid} timed out draining")
                with w.cond:
                    if not w.input_q:
                        w.cond.wait(timeout=0.05)
            with out_ready:
                out_q.append(None)
                out_ready.notify()
            sender.join(timeout=30.0)
            barrier.wait()
        except BaseException as exc:  # surface on the main thread
            w.error = exc
            barrier.abort()

    threads = [threading.Thread(target=worker_loop, args=(w,)) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for mesh in meshes:
        mesh.close()
    for w in workers:
        if w.error is not None and not isinstance(w.error, threading.BrokenBarrierError):
            raise RuntimeError(f"worker {w.wid} failed") from w.error
    for w in workers:
        if isinstance(w.error, threading.BrokenBarrierError):
            raise RuntimeError("cluster aborted (a peer failed)")
    return _finish_report(cfg, workers, report, t0, w0_init)
