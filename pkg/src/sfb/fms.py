"""Client-server full-matrix synchronization baseline.

Clients compute exactly the batches the peer-to-peer engine would (same
seeds, same sampler), but materialize them into dense update matrices
and ship those to a central server; the server adds the updates in
client-id order, applies the proximal operator once, and returns the
full parameter matrix to every client.  Matrices go on the wire dense
even when the updates are sparse, which keeps the cost accounting at
exactly 2*P*J*D values per round.

Lockstep rounds only: that is the regime in which the trajectory is
comparable, update for update, with the broadcast engine.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import ExperimentConfig, Worker, compute_batch, make_workers
from .harness import ReportRow, RunReport
from .models import objective, sc_prox
from .tensor import ParamMatrix, materialize_update
from .transport import MatrixMessage, encode

__all__ = ["ServerState", "client_round", "run_fms"]


@dataclass
class ServerState:
    matrix: ParamMatrix
    round: int
    clients: int

    @property
    def server_id(self) -> int:
        """Counter edge id for the server (one past the last client)."""
        return self.clients


def client_round(w: Worker, c: int, server: ServerState, counters) -> np.ndarray:
    """One client's upload: compute this round's batch, send it dense.

    Returns the materialized update so the server can aggregate it.
    """
    batch = compute_batch(w, c)
    w.clock.record_commit()
    w.batch_log.append(batch)
    if batch.pairs:
        delta = materialize_update(batch).values
    else:
        delta = np.zeros((w.matrix.rows, w.matrix.cols))
    msg = MatrixMessage(sender=w.wid, clock=server.round + 1, values=delta)
    counters.record_send(w.wid, server.server_id, delta.size, len(encode(msg)))
    return delta


def run_fms(cfg: ExperimentConfig) -> RunReport:
    if cfg.staleness != 0:
        raise ValueError("the full-matrix baseline only runs lockstep")
    workers = make_workers(cfg)
    server = ServerState(matrix=workers[0].matrix.copy(), round=0,
                         clients=cfg.workers)
    report = RunReport()
    report.model_kind = cfg.spec.kind
    w0_init = server.matrix.copy()
    t0 = time.perf_counter()
    for rnd in range(1, cfg.iters + 1):
        c = rnd - 1
        for w in workers:  # ascending client id: matches the engine's order
            delta = client_round(w, c, server, report.counters)
            server.matrix.values += delta
        if cfg.spec.kind == "sc":
            sc_prox(server.matrix)
        if not np.isfinite(server.matrix.values).all():
            raise RuntimeError(f"server diverged at round {rnd}")
        server.round = rnd
        down = MatrixMessage(sender=server.server_id, clock=rnd,
                             values=server.matrix.values)
        payload_len = len(encode(down))
        for w in workers:
            report.counters.record_send(server.server_id, w.wid,
                                        server.matrix.values.size, payload_len)
            w.matrix = server.matrix.copy()
            if w.sdca is not None:
                w.sdca.z = w.matrix
        if cfg.capture_trajectory:
            report.trajectory.append(server.matrix.copy())
        if rnd % cfg.obj_every == 0 and rnd < cfg.iters:
            report.rows.append(ReportRow(
                iter=rnd, wall_ms=(time.perf_counter() - t0) * 1e3,
                objective=_server_objective(cfg, server, workers),
                comm_values=report.counters.values_sent,
                comm_bytes=report.counters.bytes_sent,
                max_disagreement=0.0,
            ))
    report.final_matrices = [w.matrix.copy() for w in workers]
    report.batch_log = [w.batch_log for w in workers]
    report.tau_trace = [w.tau_trace for w in workers]
    report.initial_matrix = w0_init
    report.rows.append(ReportRow(
        iter=cfg.iters, wall_ms=(time.perf_counter() - t0) * 1e3,
        objective=_server_objective(cfg, server, workers),
        comm_values=report.counters.values_sent,
        comm_bytes=report.counters.bytes_sent,
        max_disagreement=0.0,
    ))
    return report


def _server_objective(cfg: ExperimentConfig, server: ServerState,
                      workers: list[Worker]) -> float:
    if cfg.spec.uses_dual_ascent:
        return objective(cfg.spec, ParamMatrix(server.matrix.values / cfg.spec.lam),
                         cfg.data)
    return objective(cfg.spec, server.matrix, cfg.data)
