"""Per-source stochastic filtering.

Each source's DL estimate is quantized to a binary state sequence, treated
as the output of a binary asymmetric channel (BAC) driven by a two-state
Markov chain, and smoothed with the forward-backward algorithm. Unknown
chain/BAC parameters are fitted by EM.

Functions operating on a single row accept 1-D input; the ``*_batch``
variants process every row of an R x T array in one pass with per-row
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .scenario import HmmParams, ParameterError

CLAMP = 1e-6


class ModelMismatchError(ValueError):
    """The observations have zero likelihood under the given parameters."""


@dataclass(frozen=True)
class BacParams:
    """``p_flip`` = Pr(observed 1 | true 0), ``q_flip`` = Pr(observed 0 | true 1)."""

    p_flip: float | tuple[float, ...] = 0.02
    q_flip: float | tuple[float, ...] = 0.27

    def __post_init__(self):
        for v in (self.p_flip, self.q_flip):
            a = np.asarray(v, dtype=float)
            if np.any(~np.isfinite(a)) or np.any((a < 0) | (a > 1)):
                raise ParameterError(f"flip probabilities must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class EmConfig:
    init_hmm: HmmParams = field(default_factory=lambda: HmmParams(0.5, 0.5))
    init_bac: BacParams = field(default_factory=lambda: BacParams(0.1, 0.2))
    eps: float = 1e-5
    max_iters: int = 500

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class PosteriorSet:
    marginal: np.ndarray  # (..., T) Pr(s(t) = 1 | all observations)
    pairwise: np.ndarray  # (..., T-1, 2, 2) [.., t-1, i, j] = Pr(s(t) = i, s(t-1) = j | obs)
    loglik: np.ndarray | float


@dataclass
class EmResult:
    hmm: HmmParams
    bac: BacParams
    posteriors: PosteriorSet
    converged: np.ndarray | bool
    iterations: int
    loglik_trace: list = field(default_factory=list)


def transition_matrix(p: float, q: float) -> np.ndarray:
    """Row-stochastic matrix, row = current state, column = next state."""
    return np.array([[1.0 - p, p], [q, 1.0 - q]])


def quantize_states(x_row, gamma: float) -> np.ndarray:
    """1 where ``|x| > gamma`` (strict), else 0."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return (np.abs(np.asarray(x_row)) > gamma).astype(np.int8)


def _as_rows(v, R):
    return np.broadcast_to(np.asarray(v, dtype=float), (R,)).astype(float)


def forward_backward_batch(obs, p, q, p_flip, q_flip, prior=None) -> PosteriorSet:
    """Scaled forward-backward smoothing for R independent binary sequences.

    ``obs`` is R x T; parameters broadcast to length R. ``prior`` is the
    Pr(s(1) = 1) per row, defaulting to the chain's stationary probability
    p / (p + q) (0.5 when p + q = 0).
    """
    obs = np.asarray(obs, dtype=np.int8)
    R, T = obs.shape
    p, q = _as_rows(p, R), _as_rows(q, R)
    pf, qf = _as_rows(p_flip, R), _as_rows(q_flip, R)
    if prior is None:
        tot = p + q
        prior = np.divide(p, tot, out=np.full(R, 0.5), where=tot > 0)
    else:
        prior = _as_rows(prior, R)

    marg, xi, loglik, bad_t = _fb_kernel(obs, p, q, pf, qf, prior)
    if np.any(bad_t >= 0):
        r = int(np.flatnonzero(bad_t >= 0)[0])
        raise ModelMismatchError(f"observation at t={bad_t[r]} is impossible under the model (row {r})")
    return PosteriorSet(marg, xi, loglik)


@numba.njit(cache=True)
def _fb_kernel(obs, p, q, pf, qf, prior):
    R, T = obs.shape
    marg = np.empty((R, T))
    xi = np.empty((R, T - 1, 2, 2))
    loglik = np.zeros(R)
    bad_t = np.full(R, -1)
    alpha = np.empty((T, 2))
    beta = np.empty((T, 2))
    em = np.empty((T, 2))
    scale = np.empty(T)
    for r in range(R):
        for t in range(T):
            if obs[r, t] == 1:
                em[t, 0], em[t, 1] = pf[r], 1.0 - qf[r]
            else:
                em[t, 0], em[t, 1] = 1.0 - pf[r], qf[r]
        a0 = (1.0 - prior[r]) * em[0, 0]
        a1 = prior[r] * em[0, 1]
        for t in range(T):
            if t > 0:
                b0, b1 = alpha[t - 1, 0], alpha[t - 1, 1]
                a0 = (b0 * (1.0 - p[r]) + b1 * q[r]) * em[t, 0]
                a1 = (b0 * p[r] + b1 * (1.0 - q[r])) * em[t, 1]
            c = a0 + a1
            if not c > 0.0:
                bad_t[r] = t
                break
            alpha[t, 0], alpha[t, 1] = a0 / c, a1 / c
            scale[t] = c
            loglik[r] += np.log(c)
        if bad_t[r] >= 0:
            continue
        beta[T - 1, 0], beta[T - 1, 1] = 1.0, 1.0
        for t in range(T - 2, -1, -1):
            n0 = em[t + 1, 0] * beta[t + 1, 0]
            n1 = em[t + 1, 1] * beta[t + 1, 1]
            beta[t, 0] = ((1.0 - p[r]) * n0 + p[r] * n1) / scale[t + 1]
            beta[t, 1] = (q[r] * n0 + (1.0 - q[r]) * n1) / scale[t + 1]
        for t in range(T):
            g0 = alpha[t, 0] * beta[t, 0]
            g1 = alpha[t, 1] * beta[t, 1]
            marg[r, t] = g1 / (g0 + g1)
        for t in range(1, T):
            tot = 0.0
            for i in range(2):
                for j in range(2):
                    if j == 0:
                        trans = p[r] if i == 1 else 1.0 - p[r]
                    else:
                        trans = 1.0 - q[r] if i == 1 else q[r]
                    v = alpha[t - 1, j] * trans * em[t, i] * beta[t, i]
                    xi[r, t - 1, i, j] = v
                    tot += v
            for i in range(2):
                for j in range(2):
                    xi[r, t - 1, i, j] /= tot
    return marg, xi, loglik, bad_t


def forward_backward(s_tilde, hmm: HmmParams, bac: BacParams, prior=None) -> PosteriorSet:
    """Smoothing posteriors of one binary observation sequence."""
    _check_scalar(hmm, bac)
    out = forward_backward_batch(np.asarray(s_tilde)[None, :], hmm.p, hmm.q, bac.p_flip, bac.q_flip, prior)
    return PosteriorSet(out.marginal[0], out.pairwise[0], float(out.loglik[0]))


def _check_scalar(hmm, bac):
    for v in (hmm.p, hmm.q, bac.p_flip, bac.q_flip):
        if np.ndim(v) != 0:
            raise ParameterError("single-row functions take scalar parameters")


def map_smooth(marginal) -> np.ndarray:
    """MAP state per time step; a marginal of exactly 0.5 maps to 0."""
    m = marginal.marginal if isinstance(marginal, PosteriorSet) else np.asarray(marginal)
    return (m > 0.5).astype(np.int8)


def null_signals(x_row, s_hat) -> np.ndarray:
    x_row, s_hat = np.asarray(x_row), np.asarray(s_hat)
    if x_row.shape != s_hat.shape:
        raise ValueError(f"shape mismatch: {x_row.shape} vs {s_hat.shape}")
    return np.where(s_hat == 1, x_row, 0)


def _m_step(obs, post: PosteriorSet):
    xi = post.pairwise
    prev0 = xi[..., :, :, 0].sum(axis=(-2, -1))  # sum_t Pr(s(t-1) = 0)
    prev1 = xi[..., :, :, 1].sum(axis=(-2, -1))
    p = xi[..., :, 1, 0].sum(axis=-1) / np.maximum(prev0, 1e-300)
    q = xi[..., :, 0, 1].sum(axis=-1) / np.maximum(prev1, 1e-300)
    m1 = post.marginal
    m0 = 1.0 - m1
    pf = np.sum((obs == 1) * m0, axis=-1) / np.maximum(m0.sum(axis=-1), 1e-300)
    qf = np.sum((obs == 0) * m1, axis=-1) / np.maximum(m1.sum(axis=-1), 1e-300)
    return [np.clip(v, CLAMP, 1.0 - CLAMP) for v in (p, q, pf, qf)]


def em_fit_batch(obs, cfg: EmConfig | None = None) -> EmResult:
    """EM for (p, q, p_flip, q_flip), one independent fit per row of ``obs``.

    The initial-state prior stays fixed at the stationary law of the
    initial parameters, which makes each iteration an exact EM step, so
    the observed-data log-likelihood never decreases. Rows stop updating
    once all four parameter changes fall below ``cfg.eps``.
    """
    cfg = cfg or EmConfig()
    obs = np.asarray(obs, dtype=np.int8)
    if obs.ndim != 2 or obs.shape[1] < 2:
        raise ValueError("need R x T observations with T >= 2")
    R = obs.shape[0]
    params = [
        _as_rows(cfg.init_hmm.p, R),
        _as_rows(cfg.init_hmm.q, R),
        _as_rows(cfg.init_bac.p_flip, R),
        _as_rows(cfg.init_bac.q_flip, R),
    ]
    tot = params[0] + params[1]
    prior = np.divide(params[0], tot, out=np.full(R, 0.5), where=tot > 0)
    done = np.zeros(R, dtype=bool)
    trace = []
    it = 0
    post = forward_backward_batch(obs, *params, prior=prior)
    trace.append(post.loglik.copy())
    for it in range(1, cfg.max_iters + 1):
        new = _m_step(obs, post)
        delta = np.max(np.abs(np.stack(new) - np.stack(params)), axis=0)
        params = [np.where(done, old, nw) for old, nw in zip(params, new)]
        # frozen rows keep their posteriors; only rows still moving are re-smoothed
        live = ~done
        done |= delta < cfg.eps
        sub = forward_backward_batch(obs[live], *(v[live] for v in params), prior=prior[live])
        post.marginal[live], post.pairwise[live], post.loglik[live] = sub.marginal, sub.pairwise, sub.loglik
        trace.append(post.loglik.copy())
        if done.all():
            break
    hmm = HmmParams(tuple(params[0]), tuple(params[1]))
    bac = BacParams(tuple(params[2]), tuple(params[3]))
    return EmResult(hmm, bac, post, done, it, trace)


def em_fit(s_tilde, cfg: EmConfig | None = None) -> EmResult:
    """Fit chain and BAC parameters to a single binary sequence."""
    res = em_fit_batch(np.asarray(s_tilde)[None, :], cfg)
    post = res.posteriors
    return EmResult(
        HmmParams(res.hmm.p[0], res.hmm.q[0]),
        BacParams(res.bac.p_flip[0], res.bac.q_flip[0]),
        PosteriorSet(post.marginal[0], post.pairwise[0], float(post.loglik[0])),
        bool(res.converged[0]),
        res.iterations,
        [float(v[0]) for v in res.loglik_trace],
    )


@dataclass
class PsfOutput:
    signal: np.ndarray  # X_hat
    states: np.ndarray  # S_hat
    quantized: np.ndarray  # S_tilde
    hmm: HmmParams
    bac: BacParams
    em: EmResult | None = None


def psf_pipeline(X_tilde, gamma: float, hmm: HmmParams | None = None, bac: BacParams | None = None,
                 em_config: EmConfig | None = None) -> PsfOutput:
    """Quantize, (fit,) smooth, MAP-detect and null every source row.

    Known mode: pass ``hmm`` and ``bac``. Unknown mode: pass ``em_config``
    (or leave all three unset) and the parameters are fitted per row first.
    """
    X_tilde = np.asarray(X_tilde)
    R = X_tilde.shape[0]
    S_tilde = (np.abs(X_tilde) > gamma).astype(np.int8)
    em = None
    if hmm is None or bac is None:
        em = em_fit_batch(S_tilde, em_config)
        post = em.posteriors
        hmm, bac = em.hmm, em.bac
    else:
        try:
            post = forward_backward_batch(S_tilde, *_row_params(hmm, bac, R))
        except ModelMismatchError as exc:
            raise ModelMismatchError(f"source filtering failed: {exc}") from exc
    S_hat = map_smooth(post.marginal)
    return PsfOutput(np.where(S_hat == 1, X_tilde, 0), S_hat, S_tilde, hmm, bac, em)


def _row_params(hmm, bac, R):
    return (_as_rows(hmm.p, R), _as_rows(hmm.q, R), _as_rows(bac.p_flip, R), _as_rows(bac.q_flip, R))
