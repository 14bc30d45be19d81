"""Sparse recovery of source symbols for a fixed channel.

All solvers reduce to column problems of the form

    1/2 ||y - H x||^2 + w/2 ||x - v||^2 + tau ||x||_1

stopped on a KKT certificate. Two interchangeable engines solve them:
compiled cyclic coordinate descent (``coordinate_descent``, used by the
solvers) and a vectorized monotone accelerated proximal gradient
(``prox_grad``, which can record its objective per iteration).

Conventions: ``lasso_column`` minimizes ``1/2 ||y - Hx||^2 + lambda ||x||_1``.
The smooth-LASSO family (``smooth_lasso_seq``, ``smooth_lasso_admm``) works
with the unscaled objective returned by ``smooth_lasso_objective``::

    ||Y - HX||_F^2 + lambda sum_t ||x(t)||_1 + mu sum_{t>=2} ||x(t) - x(t-1)||^2

so with ``mu = 0`` each of its columns is ``lasso_column`` at ``lambda / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


class ConvergenceError(RuntimeError):
    """An inner solve did not reach its tolerance.

    ``iterate`` holds the last iterate and ``where`` locates the failure
    (column index, ADMM iteration, ...).
    """

    def __init__(self, message, iterate=None, where=None):
        super().__init__(message)
        self.iterate = iterate
        self.where = where or {}


class NumericalError(ArithmeticError):
    """A linear system that should be solvable is singular."""


@dataclass(frozen=True)
class SolverParams:
    lam: float = 1e-3
    mu: float = 5.0
    rho: float = 0.1
    admm_iters: int = 30
    inner_tol: float = 1e-6
    inner_max_iters: int = 10000  # iterations or coordinate sweeps
    sparsity: int | None = None  # OMP atoms per column
    omp_residual_tol: float | None = None

    def __post_init__(self):
        for name in ("lam", "mu", "rho"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.admm_iters < 1:
            raise ValueError("admm_iters must be >= 1")
        if self.inner_tol <= 0:
            raise ValueError("inner_tol must be positive")


@dataclass
class SparseSolution:
    signal: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)


def soft_threshold(v, tau):
    """Complex magnitude shrinkage ``v * max(1 - tau/|v|, 0)``; maps 0 to 0."""
    v = np.asarray(v)
    mag = np.abs(v)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):  # discarded branch
        scale = np.where(mag > tau, 1.0 - tau / np.where(mag > 0, mag, 1.0), 0.0)
    out = v * scale
    return out.item() if out.ndim == 0 else out


def spectral_norm_sq(H: np.ndarray) -> float:
    return float(np.linalg.norm(H, 2) ** 2)


def _kkt_violation(grad, X, tau):
    """Per-column distance of ``-grad`` from ``tau * subdiff ||x||_1`` (max norm)."""
    mag = np.abs(X)
    nz = mag > 0
    zero_part = np.where(nz, 0.0, np.maximum(np.abs(grad) - tau, 0.0))
    phase = np.where(nz, X / np.where(nz, mag, 1.0), 0.0)
    nz_part = np.where(nz, np.abs(grad + tau * phase), 0.0)
    return np.maximum(zero_part, nz_part).max(axis=0)


def prox_grad(G, B, tau, w=0.0, V=None, X0=None, L=None, tol=1e-6, max_iters=2000, trace=None):
    """Monotone accelerated proximal gradient, batched over columns.

    Minimizes, column by column, ``1/2 x^H G x - Re(b^H x) + w/2 ||x - v||^2
    + tau ||x||_1`` where ``G = H^H H`` and ``B = H^H Y``. ``w`` may be a
    scalar or one weight per column.

    Returns ``(X, converged_mask, kkt)``. Objective values (summed over
    columns) are appended to ``trace`` when given; they never increase.
    """
    N, T = B.shape
    w = np.broadcast_to(np.asarray(w, dtype=float), (T,))
    V = np.zeros_like(B) if V is None else V
    if L is None:
        L = float(np.linalg.eigvalsh(G).max())
    step = 1.0 / (L + w)  # per-column

    def gradient(X, cols):
        return G @ X - B[:, cols] + w[cols] * (X - V[:, cols])

    def objective(X, GX, cols):
        quad = 0.5 * np.real(np.sum(X.conj() * GX, axis=0)) - np.real(np.sum(B[:, cols].conj() * X, axis=0))
        return quad + 0.5 * w[cols] * np.sum(np.abs(X - V[:, cols]) ** 2, axis=0) + tau * np.abs(X).sum(axis=0)

    X = np.zeros_like(B) if X0 is None else np.array(X0, dtype=np.complex128)
    all_cols = np.arange(T)
    GX = G @ X
    F = objective(X, GX, all_cols)
    kkt = _kkt_violation(GX - B + w * (X - V), X, tau)
    converged = kkt <= tol
    if trace is not None:
        trace.append(float(F.sum()))

    active = np.flatnonzero(~converged)
    Xa = X[:, active]
    Za = Xa.copy()
    t_k = np.ones(active.size)
    for _ in range(max_iters):
        if active.size == 0:
            break
        # extrapolated point
        Zp = Za
        g = gradient(Zp, active)
        cand = soft_threshold(Zp - step[active] * g, step[active] * tau)
        Gc = G @ cand
        Fc = objective(cand, Gc, active)
        # a plain step (momentum just restarted) never increases the objective in
        # exact arithmetic; accepting it keeps progress once decreases fall below rounding
        better = (Fc <= F[active]) | (t_k == 1.0)
        Xnew = np.where(better, cand, Xa)
        F[active] = np.minimum(Fc, F[active])
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k**2))
        Za = Xnew + (t_k / t_next) * (cand - Xnew) + ((t_k - 1.0) / t_next) * (Xnew - Xa)
        # momentum restart where the step failed to descend
        t_next = np.where(better, t_next, 1.0)
        Za = np.where(better, Za, Xnew)
        t_k = t_next
        Xa = Xnew
        X[:, active] = Xa
        if trace is not None:
            trace.append(float(F.sum()))

        GXa = np.where(better, Gc, G @ Xa) if not better.all() else Gc
        k = _kkt_violation(GXa - B[:, active] + w[active] * (Xa - V[:, active]), Xa, tau)
        kkt[active] = k
        done = k <= tol
        if done.any():
            keep = ~done
            active, Xa, Za, t_k = active[keep], Xa[:, keep], Za[:, keep], t_k[keep]
    converged = kkt <= tol
    return X, converged, kkt


@numba.njit(cache=True)
def _kkt_col(gx, b, w, x, v, tau):
    worst = 0.0
    for i in range(x.shape[0]):
        g = gx[i] - b[i] + w * (x[i] - v[i])
        m = abs(x[i])
        if m > 0.0:
            r = abs(g + tau * x[i] / m)
        else:
            r = max(abs(g) - tau, 0.0)
        if r > worst:
            worst = r
    return worst


@numba.njit(cache=True)
def _obj_col(gx, b, w, x, v, tau):
    f = 0.0
    for i in range(x.shape[0]):
        f += 0.5 * (x[i].conjugate() * gx[i]).real - (b[i].conjugate() * x[i]).real
        d = x[i] - v[i]
        f += 0.5 * w * (d.real * d.real + d.imag * d.imag) + tau * abs(x[i])
    return f


@numba.njit(cache=True)
def _cd_kernel(G, B, tau, w, V, X0, tol, max_sweeps, chain):
    """Cyclic coordinate descent, one column at a time.

    Coordinate i of ``1/2 x^H G x - Re(b^H x) + w/2 ||x - v||^2 + tau ||x||_1``
    has the closed-form minimizer ``soft(r_i, tau) / (G_ii + w)`` with
    ``r_i = b_i + w v_i - sum_{j != i} G_ij x_j``. With ``chain`` column t is
    anchored to (and started from) the finished column t-1.
    """
    N, T = B.shape
    X = X0.copy()
    kkt = np.zeros(T)
    sweeps = np.zeros(T, np.int64)
    for t in range(T):
        b = B[:, t]
        wt = w[t]
        if chain and t > 0:
            v = X[:, t - 1].copy()
            x = v.copy()
        else:
            v = V[:, t].copy()
            x = X[:, t].copy()
        gx = G @ x
        k = _kkt_col(gx, b, wt, x, v, tau)
        it = 0
        while k > tol and it < max_sweeps:
            it += 1
            for i in range(N):
                d = G[i, i].real + wt
                if d <= 0.0:
                    continue
                r = b[i] + wt * v[i] - (gx[i] - G[i, i] * x[i])
                m = abs(r)
                xi = r * ((1.0 - tau / m) / d) if m > tau else 0.0
                delta = xi - x[i]
                if delta != 0.0:
                    x[i] = xi
                    for j in range(N):
                        gx[j] += G[j, i] * delta
            k = _kkt_col(gx, b, wt, x, v, tau)
        X[:, t] = x
        kkt[t] = k
        sweeps[t] = it
    return X, kkt, sweeps


def coordinate_descent(G, B, tau, w=0.0, V=None, X0=None, tol=1e-6, max_iters=2000, chain=False):
    """Compiled solver for the same column problems as :func:`prox_grad`.

    Cyclic coordinate descent with the same KKT stopping rule; ``max_iters``
    counts full sweeps over the coordinates. With
    ``chain=True`` column t uses the finished column t-1 as both anchor
    and starting point (``V`` is then ignored for t >= 1).
    Returns ``(X, converged_mask, kkt)``.
    """
    G = np.ascontiguousarray(G, dtype=np.complex128)
    B = np.asarray(B, dtype=np.complex128)
    N, T = B.shape
    w = np.ascontiguousarray(np.broadcast_to(np.asarray(w, dtype=float), (T,)))
    V = np.zeros_like(B) if V is None else np.asarray(V, dtype=np.complex128)
    X0 = np.zeros_like(B) if X0 is None else np.array(X0, dtype=np.complex128)
    X, kkt, _ = _cd_kernel(G, B, float(tau), w, V, X0, float(tol), int(max_iters), bool(chain))
    return X, kkt <= tol, kkt


def lasso_column(H, y, lam, params: SolverParams | None = None, x0=None, trace=None):
    """Minimize ``1/2 ||y - Hx||^2 + lam ||x||_1`` for one column (or a batch).

    ``y`` may be a vector or an M x T matrix of independent columns.
    Raises :class:`ConvergenceError` when the KKT residual stays above
    ``params.inner_tol`` after ``params.inner_max_iters`` iterations.
    """
    params = params or SolverParams()
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if H.shape[0] != y.shape[0]:
        raise ValueError(f"H has {H.shape[0]} rows but y has {y.shape[0]}")
    vector = y.ndim == 1
    Y = y[:, None] if vector else y
    G = H.conj().T @ H
    B = H.conj().T @ Y
    X0 = None if x0 is None else (np.asarray(x0)[:, None] if vector else x0)
    if trace is None:
        X, ok, kkt = coordinate_descent(G, B, lam, X0=X0, tol=params.inner_tol, max_iters=params.inner_max_iters)
    else:  # the proximal-gradient engine records its objective per iteration
        X, ok, kkt = prox_grad(G, B, lam, X0=X0, tol=params.inner_tol, max_iters=params.inner_max_iters, trace=trace)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ConvergenceError(
            f"LASSO did not converge (KKT {kkt[bad]:.3g} > {params.inner_tol:g}) at column {bad}",
            iterate=X[:, 0] if vector else X,
            where={"column": bad},
        )
    return X[:, 0] if vector else X


def default_sparsity(n_sources: int, p: float, q: float) -> int:
    """Expected number of simultaneously active sources, rounded."""
    return max(1, int(round(n_sources * p / (p + q))))


def omp_column(H, y, sparsity: int | None = None, residual_tol: float | None = None):
    """Orthogonal matching pursuit with least-squares coefficients on the support.

    Stops after ``sparsity`` atoms, or once ``||r|| <= residual_tol``,
    whichever comes first. At least one stopping rule must be given.
    """
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    M, N = H.shape
    if sparsity is None and residual_tol is None:
        raise ValueError("give a sparsity level or a residual tolerance")
    k_max = min(M, N) if sparsity is None else sparsity
    if k_max > min(M, N):
        raise ValueError(f"sparsity {k_max} exceeds min(M, N) = {min(M, N)}")
    norms = np.linalg.norm(H, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    x = np.zeros(N, dtype=np.complex128)
    support: list[int] = []
    r = y.copy()
    tol = 0.0 if residual_tol is None else residual_tol
    while len(support) < k_max and np.linalg.norm(r) > tol:
        corr = np.abs(H.conj().T @ r) / norms
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        Hs = H[:, support]
        gram = Hs.conj().T @ Hs
        if np.linalg.cond(gram) > 1e12:
            raise NumericalError(f"sub-dictionary on support {support} is singular")
        coef = np.linalg.solve(gram, Hs.conj().T @ y)
        r = y - Hs @ coef
    if support:
        x[support] = coef
    return x


def omp(H, Y, sparsity: int | None = None, residual_tol: float | None = None) -> SparseSolution:
    Y = np.asarray(Y)
    X = np.column_stack([omp_column(H, Y[:, t], sparsity, residual_tol) for t in range(Y.shape[1])])
    return SparseSolution(X, [smooth_lasso_objective(H, X, Y, 0.0, 0.0)])


def smooth_lasso_objective(H, X, Y, lam: float, mu: float) -> float:
    X = np.asarray(X)
    fit = np.linalg.norm(np.asarray(Y) - np.asarray(H) @ X) ** 2
    l1 = np.abs(X).sum()
    smooth = np.sum(np.abs(np.diff(X, axis=1)) ** 2)
    return float(fit + lam * l1 + mu * smooth)


def smooth_lasso_seq(H, Y, params: SolverParams) -> SparseSolution:
    """Solve the smooth LASSO column by column, each column anchored to the last.

    Column t minimizes ``||y(t) - Hx||^2 + lam ||x||_1 + mu ||x - x(t-1)||^2``
    with ``x(t-1)`` the already-computed previous output.
    """
    H = np.asarray(H, dtype=np.complex128)
    Y = np.asarray(Y, dtype=np.complex128)
    N, T = H.shape[1], Y.shape[1]
    G = H.conj().T @ H
    B = H.conj().T @ Y
    tau = params.lam / 2.0
    w = np.full(T, params.mu)
    w[0] = 0.0
    X, ok, kkt = coordinate_descent(G, B, tau, w, tol=params.inner_tol, max_iters=params.inner_max_iters, chain=True)
    if not ok.all():
        t = int(np.flatnonzero(~ok)[0])
        raise ConvergenceError(f"SL-SEQ column {t} did not converge (KKT {kkt[t]:.3g})", iterate=X, where={"column": t})
    return SparseSolution(X, [smooth_lasso_objective(H, X, Y, params.lam, params.mu)])


def smooth_lasso_admm(H, Y, params: SolverParams, init_multipliers=None) -> SparseSolution:
    """Smooth LASSO by ADMM over per-time-step blocks.

    Block t owns ``x(t)`` and a local copy ``c(t)`` of ``x(t-1)``; the
    smoothness term ``mu ||x(t) - c(t)||^2`` is local to the block. Copies
    are tied to the originals through consensus points ``z(t)``, with one
    multiplier vector per link (``T - 1`` of them). Each iteration

    1. solves the T block problems in parallel (first, middle, last),
    2. averages ``z(t) = (x(t) + c(t+1)) / 2``,
    3. updates ``alpha(t) += rho (x(t) - c(t+1))``.

    ``residual_trace`` records ``max_t ||x(t) - c(t+1)||`` per iteration.
    """
    H = np.asarray(H, dtype=np.complex128)
    Y = np.asarray(Y, dtype=np.complex128)
    N, T = H.shape[1], Y.shape[1]
    lam, mu, rho = params.lam, params.mu, params.rho
    G = H.conj().T @ H
    B = H.conj().T @ Y
    tau = lam / 2.0

    if T > 1 and rho <= 0:
        raise ValueError("rho must be positive when T > 1")
    if T == 1:
        X, ok, kkt = coordinate_descent(G, B, tau, tol=params.inner_tol, max_iters=params.inner_max_iters)
        if not ok.all():
            raise ConvergenceError("SL-ADMM block did not converge", iterate=X, where={"iteration": 0, "t": 0})
        return SparseSolution(X, [smooth_lasso_objective(H, X, Y, lam, mu)], [0.0])

    if init_multipliers is None:
        alpha = np.ones((N, T - 1), dtype=np.complex128)
    else:
        alpha = np.array(init_multipliers, dtype=np.complex128).reshape(N, T - 1)
    z = np.zeros((N, T - 1), dtype=np.complex128)
    kappa = mu * rho / (mu + rho)

    # quadratic weight per block: x-part (rho, blocks 1..T-1) + c-part (kappa, blocks 2..T)
    W = np.zeros(T)
    W[:-1] += rho
    W[1:] += kappa
    X = np.zeros((N, T), dtype=np.complex128)
    C = np.zeros((N, T - 1), dtype=np.complex128)  # C[:, t-1] = copy of x(t-1) held by block t
    obj_trace, res_trace = [], []
    for it in range(params.admm_iters):
        # anchor for the x-part: z(t) - alpha(t) / (2 rho)
        a_x = z - alpha / (2.0 * rho)
        # anchor for the c-part: z(t-1) + alpha(t-1) / (2 rho)
        a_c = z + alpha / (2.0 * rho)
        V = np.zeros((N, T), dtype=np.complex128)
        V[:, :-1] += rho * a_x
        V[:, 1:] += kappa * a_c
        V = np.divide(V, W, out=np.zeros_like(V), where=W > 0)
        # full-scale block objective halved: 1/2||y-Hx||^2 + W/2||x-v||^2 + lam/2||x||_1
        X, ok, kkt = coordinate_descent(G, B, tau, W, V, X, params.inner_tol, params.inner_max_iters)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise ConvergenceError(
                f"SL-ADMM block {bad} did not converge at iteration {it} (KKT {kkt[bad]:.3g})",
                iterate=X,
                where={"iteration": it, "t": bad},
            )
        C = (mu * X[:, 1:] + rho * a_c) / (mu + rho)
        gap = X[:, :-1] - C
        z = 0.5 * (X[:, :-1] + C)
        alpha = alpha + rho * gap
        res_trace.append(float(np.linalg.norm(gap, axis=0).max()))
        obj_trace.append(smooth_lasso_objective(H, X, Y, lam, mu))
    sol = SparseSolution(X, obj_trace, res_trace)
    sol.multipliers = alpha
    return sol
