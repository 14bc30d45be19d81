"""Scoring against ground truth: alignment, Pd/Pfa, EVM, ROC curves, parameter errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Alignment:
    """``perm[i]`` is the estimated row matched to true row ``i``;
    ``phase[i] * X_est[perm[i]]`` is the corrected estimate of row ``i``."""

    perm: np.ndarray
    phase: np.ndarray

    def apply(self, X_est) -> np.ndarray:
        return self.phase[:, None] * np.asarray(X_est)[self.perm]

    def apply_states(self, S_est) -> np.ndarray:
        return np.asarray(S_est)[self.perm]


@dataclass
class DetectionReport:
    pd: float
    pfa: float
    true_active: int
    detected_active: int
    false_active: int
    true_inactive: int
    undefined: tuple[str, ...] = ()


@dataclass
class EvmReport:
    evm_percent: float
    detected_set_sizes: np.ndarray
    undefined: bool = False


def _unit(z):
    mag = np.abs(z)
    return np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 1.0 + 0j)


def correlation_matrix(X_true, X_est) -> np.ndarray:
    """``|<x_true_i, x_est_j>| / (||x_true_i|| ||x_est_j||)``, zero for zero rows."""
    X_true, X_est = np.asarray(X_true, dtype=np.complex128), np.asarray(X_est, dtype=np.complex128)
    inner = np.abs(X_true.conj() @ X_est.T)
    nt = np.linalg.norm(X_true, axis=1)
    ne = np.linalg.norm(X_est, axis=1)
    denom = np.outer(nt, ne)
    return np.divide(inner, denom, out=np.zeros_like(inner), where=denom > 0)


def align_sources(X_true, X_est) -> Alignment:
    """Greedy max-|correlation| matching of estimated rows to true rows.

    Pairs are fixed in decreasing order of correlation; rows left over
    (including all-zero rows) are matched in index order with phase 1.
    """
    X_true, X_est = np.asarray(X_true), np.asarray(X_est)
    if X_true.shape != X_est.shape:
        raise ValueError(f"shape mismatch: {X_true.shape} vs {X_est.shape}")
    N = X_true.shape[0]
    C = correlation_matrix(X_true, X_est)
    perm = np.full(N, -1)
    free_true, free_est = np.ones(N, bool), np.ones(N, bool)
    order = np.argsort(-C, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), N)
        if C[i, j] <= 0:
            break
        if free_true[i] and free_est[j]:
            perm[i] = j
            free_true[i] = free_est[j] = False
    perm[free_true] = np.flatnonzero(free_est)
    inner = np.sum(X_est[perm].conj() * X_true, axis=1)
    return Alignment(perm, _unit(inner))


def alignment_score(X_true, X_est, perm) -> float:
    C = correlation_matrix(X_true, X_est)
    return float(C[np.arange(len(perm)), perm].sum())


def detection_counts(S_true, S_hat) -> np.ndarray:
    """``[true_active, detected_active, false_active, true_inactive]``."""
    S_true = np.asarray(S_true, dtype=bool)
    S_hat = np.asarray(S_hat, dtype=bool)
    if S_true.shape != S_hat.shape:
        raise ValueError(f"shape mismatch: {S_true.shape} vs {S_hat.shape}")
    return np.array(
        [S_true.sum(), (S_true & S_hat).sum(), (~S_true & S_hat).sum(), (~S_true).sum()], dtype=np.int64
    )


def report_from_counts(counts) -> DetectionReport:
    ta, da, fa, ti = (int(c) for c in counts)
    undefined = []
    if ta == 0:
        undefined.append("pd")
    if ti == 0:
        undefined.append("pfa")
    pd = da / ta if ta else math.nan
    pfa = fa / ti if ti else math.nan
    return DetectionReport(pd, pfa, ta, da, fa, ti, tuple(undefined))


def detection_metrics(S_true, S_hat) -> DetectionReport:
    """Pd over truly active cells and Pfa over truly inactive cells.

    A zero denominator yields NaN and is named in ``undefined``.
    """
    return report_from_counts(detection_counts(S_true, S_hat))


def evm_sums(X_true, X_hat, S_true, S_hat):
    """Error and reference energies over correctly detected active cells."""
    D = np.asarray(S_true, dtype=bool) & np.asarray(S_hat, dtype=bool)
    err = np.sum(np.abs(np.asarray(X_true) - np.asarray(X_hat)) ** 2 * D)
    ref = np.sum(np.abs(np.asarray(X_true)) ** 2 * D)
    return float(err), float(ref), D.sum(axis=1)


def evm(X_true, X_hat, S_true, S_hat) -> EvmReport:
    """Error vector magnitude (percent) on the correctly detected samples."""
    err, ref, sizes = evm_sums(X_true, X_hat, S_true, S_hat)
    if ref <= 0:
        return EvmReport(math.nan, sizes, True)
    return EvmReport(100.0 * math.sqrt(err / ref), sizes)


@dataclass
class RocCurve:
    """Pooled ROC over trials for one method; arrays are indexed by gamma."""

    method: str
    gamma: np.ndarray
    counts: np.ndarray  # (n_gamma, 4) pooled detection counts
    trial_pd: np.ndarray  # (n_trials, n_gamma)
    trial_pfa: np.ndarray
    evm_err: np.ndarray = field(default=None)
    evm_ref: np.ndarray = field(default=None)
    trial_evm: np.ndarray = field(default=None)  # (n_trials, n_gamma) percent, NaN when undefined

    @property
    def pd(self) -> np.ndarray:
        return self.counts[:, 1] / np.maximum(self.counts[:, 0], 1)

    @property
    def pfa(self) -> np.ndarray:
        return self.counts[:, 2] / np.maximum(self.counts[:, 3], 1)

    @property
    def evm_percent(self) -> np.ndarray:
        if self.evm_err is None:
            return np.full(len(self.gamma), np.nan)
        return 100.0 * np.sqrt(self.evm_err / np.where(self.evm_ref > 0, self.evm_ref, np.nan))

    def points(self) -> np.ndarray:
        """``(pfa, pd)`` pairs sorted by pfa."""
        pts = np.column_stack([self.pfa, self.pd])
        return pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def hull(self) -> np.ndarray:
        """Monotone (non-decreasing pd) envelope of the sorted points."""
        pts = self.points()
        return np.column_stack([pts[:, 0], np.maximum.accumulate(pts[:, 1])])

    def pd_at(self, pfa: float) -> float:
        return pd_at_pfa(self.hull(), pfa)

    def pd_at_trials(self, pfa: float) -> np.ndarray:
        """Per-trial pd at the given pfa, for standard errors."""
        out = []
        for pd_row, pfa_row in zip(self.trial_pd, self.trial_pfa):
            pts = np.column_stack([pfa_row, pd_row])
            pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
            pts[:, 1] = np.maximum.accumulate(pts[:, 1])
            out.append(pd_at_pfa(pts, pfa))
        return np.array(out)


def pd_at_pfa(points, pfa: float) -> float:
    """Linear interpolation of a sorted, monotone (pfa, pd) curve.

    Outside the sampled pfa range the curve is extended with the end points
    (0, 0) and (1, 1).
    """
    pts = np.asarray(points, dtype=float)
    x = np.concatenate([[0.0], pts[:, 0], [1.0]])
    y = np.concatenate([[0.0], pts[:, 1], [1.0]])
    y = np.maximum.accumulate(y)
    # keep the best pd for duplicate pfa values
    xu, idx = np.unique(x, return_index=True)
    yu = np.array([y[x == v].max() for v in xu])
    return float(np.interp(pfa, xu, yu))


def roc_from_trials(method: str, gamma_grid, per_trial_counts, evm_parts=None) -> RocCurve:
    """Pool per-trial counts (n_trials, n_gamma, 4) into one curve."""
    c = np.asarray(per_trial_counts, dtype=np.int64)
    trial_pd = c[:, :, 1] / np.maximum(c[:, :, 0], 1)
    trial_pfa = c[:, :, 2] / np.maximum(c[:, :, 3], 1)
    curve = RocCurve(method, np.asarray(gamma_grid, float), c.sum(axis=0), trial_pd, trial_pfa)
    if evm_parts is not None:
        e = np.asarray(evm_parts, dtype=float)
        curve.evm_err, curve.evm_ref = e[:, :, 0].sum(axis=0), e[:, :, 1].sum(axis=0)
        ref = e[:, :, 1]
        curve.trial_evm = 100.0 * np.sqrt(e[:, :, 0] / np.where(ref > 0, ref, np.nan))
    return curve


def standard_error(values) -> float:
    """Standard error of the mean over the finite entries (NaN if fewer than two)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return math.nan
    return float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class ParamErrors:
    p: np.ndarray
    q: np.ndarray
    p_flip: np.ndarray
    q_flip: np.ndarray

    def summary(self) -> dict:
        out = {}
        for name in ("p", "q", "p_flip", "q_flip"):
            v = np.atleast_1d(getattr(self, name))
            out[name] = {"mean": float(v.mean()), "max": float(v.max()), "std": float(v.std())}
        return out


def param_error(true_hmm, true_bac, fit_hmm, fit_bac) -> ParamErrors:
    """Absolute errors per source for (p, q, p_flip, q_flip)."""

    def err(a, b):
        return np.abs(np.atleast_1d(np.asarray(a, float)) - np.atleast_1d(np.asarray(b, float)))

    return ParamErrors(
        err(fit_hmm.p, true_hmm.p),
        err(fit_hmm.q, true_hmm.q),
        err(fit_bac.p_flip, true_bac.p_flip),
        err(fit_bac.q_flip, true_bac.q_flip),
    )
