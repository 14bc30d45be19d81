"""Alternating estimation of the channel (dictionary) and the source signals."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import sparse_solvers as ss
from .scenario import complex_gaussian


class SignalSolver(str, enum.Enum):
    OMP = "omp"
    LASSO = "lasso"
    SL_SEQ = "sl-seq"
    SL_ADMM = "sl-admm"


class ChannelUpdate(str, enum.Enum):
    MOD = "mod"
    MDU = "mdu"
    ENHANCED_MDU = "enhanced-mdu"


@dataclass(frozen=True)
class DlConfig:
    solver: SignalSolver = SignalSolver.SL_ADMM
    channel_update: ChannelUpdate = ChannelUpdate.MDU
    outer_iters: int = 50
    mdu_inner_iters: int = 5
    rel_obj_tol: float = 1e-4
    support_gamma: float = 0.5
    ridge: float = 1e-8
    n_atoms: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "solver", SignalSolver(self.solver))
        object.__setattr__(self, "channel_update", ChannelUpdate(self.channel_update))
        if self.outer_iters < 1 or self.mdu_inner_iters < 1:
            raise ValueError("outer_iters and mdu_inner_iters must be >= 1")


@dataclass
class DlResult:
    channel: np.ndarray
    signal: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0


class DictionaryLearningError(RuntimeError):
    def __init__(self, message, outer_iteration=None):
        super().__init__(message)
        self.outer_iteration = outer_iteration


def _gram_solve(gram: np.ndarray, rhs: np.ndarray, ridge: float | None) -> np.ndarray:
    """Solve ``gram @ out = rhs``; ``ridge`` scales a Tikhonov term by trace/N."""
    n = gram.shape[0]
    scale = np.real(np.trace(gram)) / n
    if ridge:
        if scale <= 0:  # all-zero signals: nothing to fit, leave the atoms dead
            return np.zeros(rhs.shape, dtype=np.result_type(gram, rhs))
        gram = gram + ridge * scale * np.eye(n)
    elif np.linalg.cond(gram) > 1e12:
        raise ss.NumericalError("Gram matrix is singular; pass ridge to regularize")
    return np.linalg.solve(gram, rhs)


def mod_update(Y, X, ridge: float | None = None) -> np.ndarray:
    """Frobenius-optimal channel for fixed signals: ``H = Y X^H (X X^H)^-1``."""
    Y, X = np.asarray(Y), np.asarray(X)
    gram = X @ X.conj().T
    # solve gram^T H^T = (Y X^H)^T; gram is Hermitian so use conj
    return _gram_solve(gram.conj(), (Y @ X.conj().T).T, ridge).T


def support_pattern(X, gamma: float) -> np.ndarray:
    return np.abs(X) > gamma


def restricted_least_squares(Y, H, support, ridge: float | None = None) -> np.ndarray:
    """Per-column least squares of ``y(t)`` on the atoms in ``support[:, t]``.

    Entries off the support are exactly zero.
    """
    Y, H = np.asarray(Y), np.asarray(H)
    support = np.asarray(support, dtype=bool)
    N, T = support.shape
    G = H.conj().T @ H
    B = H.conj().T @ Y
    D = support.T[:, :, None] & support.T[:, None, :]  # T x N x N
    grams = np.where(D, G[None], 0.0)
    diag = np.arange(N)
    if ridge:
        eps = ridge * np.real(np.trace(G)) / N
        grams[:, diag, diag] += np.where(support.T, eps, 0.0)
    grams[:, diag, diag] += np.where(support.T, 0.0, 1.0)  # identity off-support
    rhs = np.where(support.T, B.T, 0.0)[:, :, None]
    if not ridge:
        for t in np.flatnonzero(support.any(axis=0)):
            s = support[:, t]
            if np.linalg.cond(G[np.ix_(s, s)]) > 1e12:
                raise ss.NumericalError(f"restricted Gram matrix singular at column {t}")
    X = np.linalg.solve(grams, rhs)[:, :, 0].T
    return np.where(support, X, 0.0)


def mdu_refine(Y, H_init, support, J: int, ridge: float | None = None, X_init=None):
    """Alternate MOD and fixed-support least squares ``J`` times.

    Starts from ``X_init`` when given (the sparse-coding output), otherwise
    from a least-squares fit of ``H_init`` on ``support``. Returns ``(H, X)``.
    """
    support = np.asarray(support, dtype=bool)
    X = restricted_least_squares(Y, H_init, support, ridge) if X_init is None else np.where(support, X_init, 0.0)
    H = np.asarray(H_init)
    for _ in range(J):
        H = mod_update(Y, X, ridge)
        X = restricted_least_squares(Y, H, support, ridge)
    return H, X


def enhanced_target(Y, H_k, X_k, X_next) -> np.ndarray:
    """Substituted observation ``Y + H_k X_k - H_k X_next``."""
    return Y + H_k @ (X_k - X_next)


def normalize_columns(H, rng: np.random.Generator | None = None, tol: float = 1e-12):
    """Scale every column to unit norm; returns ``(H_normalized, scales)``.

    Multiplying row n of X by ``scales[n]`` keeps ``HX`` unchanged. Columns
    with norm below ``tol`` are replaced by random unit vectors and get a
    scale of 0.
    """
    H = np.array(H, dtype=np.complex128)
    norms = np.linalg.norm(H, axis=0)
    dead = ~(norms >= tol)  # also catches non-finite columns
    out = H / np.where(dead, 1.0, norms)
    if dead.any():
        rng = rng or np.random.default_rng()
        fresh = complex_gaussian((H.shape[0], int(dead.sum())), rng)
        out[:, dead] = fresh / np.linalg.norm(fresh, axis=0)
    return out, np.where(dead, 0.0, norms)


def sparse_code(Y, H, dl: DlConfig, params: ss.SolverParams, x0=None) -> np.ndarray:
    """One signal step with the configured sparse solver."""
    if dl.solver is SignalSolver.OMP:
        N = H.shape[1]
        k = params.sparsity or max(1, min(N, H.shape[0]) // 10)
        return ss.omp(H, Y, k, params.omp_residual_tol).signal
    if dl.solver is SignalSolver.LASSO:
        return ss.smooth_lasso_seq(H, Y, ss.SolverParams(**{**params.__dict__, "mu": 0.0})).signal
    if dl.solver is SignalSolver.SL_SEQ:
        return ss.smooth_lasso_seq(H, Y, params).signal
    return ss.smooth_lasso_admm(H, Y, params).signal


def _channel_step(Y, H, X_prev, X_new, dl: DlConfig):
    support = support_pattern(X_new, dl.support_gamma)
    if dl.channel_update is ChannelUpdate.MOD:
        return mod_update(Y, X_new, dl.ridge)
    target = Y
    if dl.channel_update is ChannelUpdate.ENHANCED_MDU:
        target = enhanced_target(Y, H, X_prev, X_new)
    H_new, _ = mdu_refine(target, H, support, dl.mdu_inner_iters, dl.ridge, X_init=X_new)
    return H_new


def run_dl(Y, dl: DlConfig, params: ss.SolverParams, seed=None, H_init=None) -> DlResult:
    """Blind estimation of (H, X) from ``Y`` by alternating minimization.

    Each outer iteration runs a signal step with the current channel, then a
    channel step, then renormalizes the channel columns (rescaling the
    signal rows so HX is unchanged). A final signal step with the last
    channel produces the returned signal estimate.
    """
    Y = np.asarray(Y, dtype=np.complex128)
    rng = np.random.default_rng(seed)
    M = Y.shape[0]
    if H_init is None:
        if dl.n_atoms is None:
            raise ValueError("set DlConfig.n_atoms or pass H_init")
        H = complex_gaussian((M, dl.n_atoms), rng)
    else:
        H = np.array(H_init, dtype=np.complex128)
    H, _ = normalize_columns(H, rng)

    trace: list[float] = []
    X_prev = None
    k = 0
    for k in range(1, dl.outer_iters + 1):
        try:
            X_new = sparse_code(Y, H, dl, params)
            trace.append(float(np.linalg.norm(Y - H @ X_new) ** 2))
            H_next = _channel_step(Y, H, X_new if X_prev is None else X_prev, X_new, dl)
        except (ss.ConvergenceError, ss.NumericalError, np.linalg.LinAlgError) as exc:
            raise DictionaryLearningError(f"outer iteration {k}: {exc}", outer_iteration=k) from exc
        H, scales = normalize_columns(H_next, rng)
        X_prev = scales[:, None] * X_new
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) <= dl.rel_obj_tol * max(trace[-2], 1e-300):
            break
    try:
        X = sparse_code(Y, H, dl, params)
    except (ss.ConvergenceError, ss.NumericalError) as exc:
        raise DictionaryLearningError(f"final signal step: {exc}", outer_iteration=k) from exc
    trace.append(float(np.linalg.norm(Y - H @ X) ** 2))
    return DlResult(H, X, trace, k)

