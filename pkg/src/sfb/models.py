"""Model plugins behind one sufficient-factor interface.

Four matrix-parametrized models are supported:

* ``mlr``    multiclass logistic regression, plain SGD
* ``l2mlr``  l2-regularized MLR solved by stochastic dual coordinate
             ascent on per-sample dual vectors
* ``dml``    distance metric learning on feature-difference vectors
             (quadratic loss for similar pairs, hinge for dissimilar)
* ``sc``     sparse coding with an l2-ball constraint on dictionary
             columns, codes solved per sample by ISTA

Each plugin turns one sample into an (u, v) factor pair such that
u v^T is the gradient of its per-sample loss f(W a) with respect to W
(for l2mlr, the dual update of the auxiliary matrix).  The engine owns
scaling and application; nothing here mutates the parameter matrix
except the explicit proximal operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamMatrix, SFPair, Vec64

__all__ = [
    "Sample",
    "ModelSpec",
    "SdcaState",
    "softmax",
    "mlr_sf",
    "dml_sf",
    "solve_sparse_code",
    "sc_sf",
    "sc_prox",
    "sdca_l2mlr_step",
    "objective",
    "sdca_dual_objective",
    "sdca_duality_gap",
]

MODEL_KINDS = ("mlr", "l2mlr", "dml", "sc")

# Slack on the column-ball feasibility check when evaluating the sparse
# coding objective; the projection itself is exact up to rounding.
_SC_FEASIBILITY_SLACK = 1e-9


@dataclass
class Sample:
    """One training sample.

    ``class_id`` is set for (l2-)mlr, ``similar`` for dml (the feature
    vector is then a precomputed difference of a pair), and neither for
    sparse coding.
    """

    a: Vec64
    class_id: int | None = None
    similar: bool | None = None


@dataclass
class ModelSpec:
    """Which model, its matrix dims, and its hyperparameters.

    rows x cols means: classes x features for (l2-)mlr, latent x feature
    dims for dml, feature dims x dictionary size for sc.
    """

    kind: str
    rows: int
    cols: int
    lam: float = 0.0
    margin: float = 1.0
    sc_max_iters: int = 200
    sc_tol: float = 1e-6
    sdca_theta: float = 0.5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("matrix dims must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.kind == "l2mlr" and self.lam <= 0:
            raise ValueError("l2mlr needs lam > 0 (strong convexity)")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if not (0.0 < self.sdca_theta <= 1.0):
            raise ValueError("sdca_theta must be in (0, 1]")

    @property
    def uses_dual_ascent(self) -> bool:
        return self.kind == "l2mlr"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _log_loss(logits: np.ndarray, y: int) -> float:
    # -log softmax(logits)[y], computed via logsumexp for stability
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[y])


def mlr_sf(W: ParamMatrix, s: Sample) -> SFPair:
    """Gradient factors of the multiclass logistic loss at one sample.

    u = softmax(W a) - e_y (the prediction residual), v = a.
    """
    if s.class_id is None or not (0 <= s.class_id < W.rows):
        raise ValueError(f"class id {s.class_id!r} out of range for {W.rows} classes")
    u = softmax(W.matvec(s.a))
    u[s.class_id] -= 1.0
    return SFPair(u=Vec64.dense(u), v=s.a)


def dml_sf(W: ParamMatrix, s: Sample, margin: float) -> SFPair | None:
    """Gradient factors for one metric-learning pair, or None.

    With z = W a: similar pairs use the quadratic loss |z|^2 (u = 2z);
    dissimilar pairs use the hinge max(0, margin - |z|^2), which has
    u = -2z while active and no gradient (no pair emitted) once
    |z|^2 >= margin.
    """
    if s.similar is None:
        raise ValueError("dml sample lacks a similarity flag")
    z = W.matvec(s.a)
    if s.similar:
        return SFPair(u=Vec64.dense(2.0 * z), v=s.a)
    if float(z @ z) >= margin:
        return None
    return SFPair(u=Vec64.dense(-2.0 * z), v=s.a)


def _spectral_bound(B: np.ndarray, iters: int = 60) -> float:
    """Power-iteration estimate of ||B^T B||_2, nudged up so a 1/L step
    stays on the safe side of the true Lipschitz constant."""
    cols = B.shape[1]
    v = np.full(cols, 1.0 / math.sqrt(cols))
    est = 0.0
    for _ in range(iters):
        w = B.T @ (B @ v)
        nw = float(np.linalg.norm(w))
        if nw <= 1e-300:
            return 0.0
        v = w / nw
        new_est = float(v @ (B.T @ (B @ v)))
        if abs(new_est - est) <= 1e-12 * max(1.0, new_est):
            est = new_est
            break
        est = new_est
    return est * (1.0 + 1e-6)


def _soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _lasso_objective(B: np.ndarray, x: np.ndarray, a: np.ndarray, lam: float) -> float:
    r = x - B @ a
    return float(0.5 * (r @ r) + lam * np.abs(a).sum())


def solve_sparse_code(
    B: ParamMatrix,
    x: Vec64,
    lam: float,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> np.ndarray:
    """Approximate argmin_a 0.5 |x - B a|^2 + lam |a|_1 by ISTA.

    Steps are 1/L with L a power-iteration bound on ||B^T B||_2, so the
    objective is non-increasing across iterations.  Stops when the
    relative objective change drops below ``tol``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    Bv = B.values
    xd = x.to_dense()
    if xd.shape[0] != B.rows:
        raise ValueError(f"signal dim {xd.shape[0]} vs dictionary rows {B.rows}")
    L = _spectral_bound(Bv)
    step = 1.0 / L if L > 0 else 1.0
    a = np.zeros(B.cols, dtype=np.float64)
    obj = _lasso_objective(Bv, xd, a, lam)
    for _ in range(max_iters):
        grad = Bv.T @ (Bv @ a - xd)
        a = _soft_threshold(a - step * grad, step * lam)
        new_obj = _lasso_objective(Bv, xd, a, lam)
        if abs(obj - new_obj) <= tol * max(1.0, abs(obj)):
            obj = new_obj
            break
        obj = new_obj
    return a


def sc_sf(B: ParamMatrix, s: Sample, lam: float, max_iters: int = 200, tol: float = 1e-6) -> SFPair:
    """Factors of the reconstruction loss at one sample.

    Solves the sample's sparse code a, then u = B a - x (the residual),
    v = a; u v^T is the gradient of 0.5 |B a - x|^2 in B at fixed a.
    """
    a = solve_sparse_code(B, s.a, lam, max_iters=max_iters, tol=tol)
    u = B.values @ a - s.a.to_dense()
    return SFPair(u=Vec64.dense(u), v=Vec64.dense(a))


def sc_prox(B: ParamMatrix) -> None:
    """Project every dictionary column onto the unit l2 ball, in place."""
    norms = np.linalg.norm(B.values, axis=0)
    over = norms > 1.0
    if over.any():
        B.values[:, over] /= norms[over]


@dataclass
class SdcaState:
    """Dual-side worker state for l2mlr.

    Holds the auxiliary matrix Z and one dual vector per local sample.
    The primal matrix is never stored: W = Z / lam at all times.
    ``z`` is updated through the shared batch-apply path, exactly like a
    received batch, so local and remote updates follow one code path.
    """

    z: ParamMatrix
    duals: list[np.ndarray]
    lam: float

    @classmethod
    def fresh(cls, rows: int, cols: int, n_local: int, lam: float) -> "SdcaState":
        if lam <= 0:
            raise ValueError("dual ascent requires lam > 0")
        return cls(
            z=ParamMatrix.zeros(rows, cols),
            duals=[np.zeros(rows, dtype=np.float64) for _ in range(n_local)],
            lam=lam,
        )

    def primal(self) -> ParamMatrix:
        return ParamMatrix(self.z.values / self.lam)


def sdca_l2mlr_step(
    state: SdcaState,
    s: Sample,
    dual_index: int,
    theta: float,
    n_total: int,
) -> SFPair:
    """One damped dual coordinate step; returns the factor pair to emit.

    With W = Z/lam and g = softmax(W a) - e_y, the dual update is
    du = theta * (u_i + g); u_i <- u_i - du.  The emitted pair is
    (du / N, a) and is meant to be applied with batch coeff -1, which
    realizes Z <- Z - (1/N) du a^T on every replica including this one
    (the caller applies the same batch it broadcasts; this function does
    not touch Z).
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("theta must be in (0, 1]")
    if s.class_id is None:
        raise ValueError("l2mlr sample lacks a class id")
    u_i = state.duals[dual_index]
    logits = state.z.matvec(s.a) / state.lam
    g = softmax(logits)
    g[s.class_id] -= 1.0
    du = theta * (u_i + g)
    state.duals[dual_index] = u_i - du
    return SFPair(u=Vec64.dense(du / n_total), v=s.a)


def _sc_objective(spec: ModelSpec, B: ParamMatrix, data: list[Sample]) -> float:
    norms = np.linalg.norm(B.values, axis=0)
    if (norms > 1.0 + _SC_FEASIBILITY_SLACK).any():
        return math.inf
    total = 0.0
    for s in data:
        a = solve_sparse_code(B, s.a, spec.lam, spec.sc_max_iters, spec.sc_tol)
        total += _lasso_objective(B.values, s.a.to_dense(), a, spec.lam)
    return total / len(data)


def objective(spec: ModelSpec, W: ParamMatrix, data: list[Sample]) -> float:
    """Full-dataset objective (1/N) sum_i f_i(W a_i) + h(W)."""
    if not data:
        raise ValueError("objective over an empty dataset")
    if spec.kind in ("mlr", "l2mlr"):
        total = 0.0
        for s in data:
            total += _log_loss(W.matvec(s.a), s.class_id)
        total /= len(data)
        if spec.kind == "l2mlr":
            total += 0.5 * spec.lam * float(np.sum(W.values**2))
        return total
    if spec.kind == "dml":
        total = 0.0
        for s in data:
            z = W.matvec(s.a)
            sq = float(z @ z)
            total += sq if s.similar else max(0.0, spec.margin - sq)
        return total / len(data)
    return _sc_objective(spec, W, data)


def _negentropy(p: np.ndarray) -> float:
    # sum p log p over the simplex; +inf off it (dual point infeasible)
    if (p < -1e-12).any() or abs(float(p.sum()) - 1.0) > 1e-9:
        return math.inf
    q = p[p > 0]
    return float((q * np.log(q)).sum())


def sdca_dual_objective(state: SdcaState, data: list[Sample]) -> float:
    """Dual objective -[(1/N) sum_i f_i*(-u_i) + |Z|^2/(2 lam)].

    f* is the Fenchel conjugate of the multiclass log loss: the negative
    entropy of e_y - u_i, finite only on the simplex.  Written so that
    primal >= dual with equality at the optimum.
    """
    n = len(data)
    ent = 0.0
    for s, u_i in zip(data, state.duals):
        p = -u_i.copy()
        p[s.class_id] += 1.0
        ent += _negentropy(p)
    ent /= n
    quad = float(np.sum(state.z.values**2)) / (2.0 * state.lam)
    return -(ent + quad)


def sdca_duality_gap(spec: ModelSpec, state: SdcaState, data: list[Sample]) -> float:
    """Primal minus dual objective at the current (W = Z/lam, U)."""
    return objective(spec, state.primal(), data) - sdca_dual_objective(state, data)
