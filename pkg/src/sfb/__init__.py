"""Sufficient factor broadcasting: peer-to-peer learning of
matrix-parametrized models by exchanging rank-1 update factors.

See README.md for an overview; the demos/ directory walks through each
capability (factor exchange vs the full-matrix baseline, consistency
models, partial broadcast, communication accounting).
"""

from .consistency import ASYNC, ClockTable, FifoViolation
from .engine import (
    DeadlockError,
    DivergenceError,
    ExperimentConfig,
    LrSchedule,
    Worker,
    apply_pending,
    compute_batch,
    lr,
    make_workers,
    run_cluster,
    run_iteration,
)
from .harness import (
    CommCounters,
    RunReport,
    expected_comm_values,
    finite_diff_check,
    gen_synthetic,
    load_dataset,
    read_sflog,
    reconstruct_auxiliary,
    save_dataset,
    write_report_csv,
    write_sflog,
)
from .models import (
    ModelSpec,
    Sample,
    SdcaState,
    dml_sf,
    mlr_sf,
    objective,
    sc_prox,
    sc_sf,
    sdca_duality_gap,
    sdca_l2mlr_step,
    solve_sparse_code,
)
from .tensor import (
    DimensionMismatch,
    ParamMatrix,
    SFBatch,
    SFPair,
    Vec64,
    apply_sf_batch,
    frobenius_distance,
    materialize_update,
)
from .topology import Topology, default_fanout, in_neighbors, is_strongly_connected, targets
from .transport import (
    CodecError,
    DelaySchedule,
    MatrixMessage,
    SFMessage,
    SimNetwork,
    TcpMesh,
    TransportError,
    decode,
    encode,
)

__version__ = "0.1.0"
