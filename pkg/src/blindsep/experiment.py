"""End-to-end trials: scenario -> dictionary learning -> PSF -> scores."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dictionary_learning as dl
from . import evaluation as ev
from . import psf
from . import scenario as sc
from . import sparse_solvers as ss

log = logging.getLogger(__name__)

SWEEP_AXES = ("gamma", "lambda", "mu", "snr", "sparsity")
METHODS = ("omp", "lasso", "sl-seq", "sl-admm")


@dataclass(frozen=True)
class PsfSettings:
    gamma: float = 0.5
    mode: str = "known"  # known | unknown | both
    bac: psf.BacParams = field(default_factory=psf.BacParams)
    em: psf.EmConfig = field(default_factory=psf.EmConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: sc.ScenarioConfig = field(default_factory=sc.ScenarioConfig)
    methods: tuple[str, ...] = METHODS
    dl: dl.DlConfig = field(default_factory=dl.DlConfig)
    solver: ss.SolverParams = field(default_factory=ss.SolverParams)
    # per-method solver overrides, e.g. {"lasso": {"lam": 0.01}}
    method_params: dict = field(default_factory=dict)
    psf: PsfSettings = field(default_factory=PsfSettings)
    gamma_grid: tuple[float, ...] = (0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0)
    sweep_axis: str | None = None
    sweep_grid: tuple[float, ...] = ()
    trials: int = 50
    seed: int = 0
    out_dir: str = "runs"
    name: str = "custom"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {self.sweep_axis!r}")
            if not self.sweep_grid:
                raise ValueError("sweep_grid must be nonempty when sweep_axis is set")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.gamma_grid:
            raise ValueError("gamma_grid must be nonempty")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["dl"]["solver"] = self.dl.solver.value
        d["dl"]["channel_update"] = self.dl.channel_update.value
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        scen = sc.ScenarioConfig.from_dict(d.pop("scenario", {}))
        dlc = dl.DlConfig(**d.pop("dl", {}))
        solver = ss.SolverParams(**d.pop("solver", {}))
        p = dict(d.pop("psf", {}))
        bac = psf.BacParams(**_tuplify(p.pop("bac", {})))
        emd = dict(p.pop("em", {}))
        em = psf.EmConfig(
            init_hmm=sc.HmmParams(**_tuplify(emd.pop("init_hmm", {"p": 0.5, "q": 0.5}))),
            init_bac=psf.BacParams(**_tuplify(emd.pop("init_bac", {"p_flip": 0.1, "q_flip": 0.2}))),
            **emd,
        )
        psf_settings = PsfSettings(bac=bac, em=em, **p)
        for key in ("methods", "gamma_grid", "sweep_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(scenario=scen, dl=dlc, solver=solver, psf=psf_settings, **d)

    def config_hash(self) -> str:
        """Short digest of everything that affects results (not the output location)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def params_for(self, method: str) -> ss.SolverParams:
        base = dataclasses.asdict(self.solver)
        base.update(self.method_params.get(method, {}))
        if method == "lasso":
            base["mu"] = 0.0
        if method == "omp" and base.get("sparsity") is None:
            p, q = self.scenario.hmm.p, self.scenario.hmm.q
            base["sparsity"] = ss.default_sparsity(self.scenario.n_sources, float(np.mean(p)), float(np.mean(q)))
        return ss.SolverParams(**base)


def _tuplify(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def trial_seed(base_seed: int, trial: int) -> int:
    """Deterministic 63-bit seed for (base seed, trial).

    Every sweep point reuses the same per-trial seeds, so points along a
    sweep are compared on common random scenarios.
    """
    seq = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, trial])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def apply_sweep(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    """Config with one sweep coordinate substituted."""
    axis = cfg.sweep_axis
    if axis == "gamma":
        return dataclasses.replace(cfg, psf=dataclasses.replace(cfg.psf, gamma=value))
    if axis == "lambda":
        mp = {m: {**v, "lam": value} for m, v in cfg.method_params.items()}
        return dataclasses.replace(cfg, solver=dataclasses.replace(cfg.solver, lam=value), method_params=mp)
    if axis == "mu":
        mp = {m: {**v, "mu": value} for m, v in cfg.method_params.items()}
        return dataclasses.replace(cfg, solver=dataclasses.replace(cfg.solver, mu=value), method_params=mp)
    if axis == "snr":
        return dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, snr_db=value))
    if axis == "sparsity":
        # value = average number of active sources; p solves N p / (p + q) = value
        q = float(np.mean(cfg.scenario.hmm.q))
        n = cfg.scenario.n_sources
        p = value * q / (n - value)
        hmm = sc.HmmParams(p, cfg.scenario.hmm.q)
        return dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, hmm=hmm))
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class MethodOutcome:
    """Per-gamma scores of one method on one trial."""

    method: str
    raw_counts: np.ndarray  # (n_gamma, 4)
    psf_counts: np.ndarray | None = None
    em_counts: np.ndarray | None = None
    raw_evm: np.ndarray | None = None  # (n_gamma, 2) error / reference energies
    psf_evm: np.ndarray | None = None
    em_evm: np.ndarray | None = None
    em_params: np.ndarray | None = None  # (n_gamma, 4, N) fitted p, q, p_flip, q_flip
    flip_truth: np.ndarray | None = None  # (n_gamma, 2, N) empirical flip rates of the quantizer
    dl_iterations: int = 0
    seconds: float = 0.0


@dataclass
class TrialResult:
    trial: int
    seed: int
    outcomes: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)


def empirical_flips(S, S_tilde) -> np.ndarray:
    """Per-source observed ``Pr(s~=1 | s=0)`` and ``Pr(s~=0 | s=1)`` (NaN if undefined)."""
    S, S_tilde = np.asarray(S, bool), np.asarray(S_tilde, bool)
    n0, n1 = (~S).sum(axis=1), S.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pf = np.where(n0 > 0, (S_tilde & ~S).sum(axis=1) / n0, np.nan)
        qf = np.where(n1 > 0, (~S_tilde & S).sum(axis=1) / n1, np.nan)
    return np.stack([pf, qf])


def score_estimate(cfg: ExperimentConfig, scen: sc.Scenario, X_tilde: np.ndarray, method: str) -> MethodOutcome:
    """Align an estimate to the truth and score raw and filtered detections over the gamma grid."""
    align = ev.align_sources(scen.signals, X_tilde)
    Xa = align.apply(X_tilde)
    S, X = scen.states, scen.signals
    n_g = len(cfg.gamma_grid)
    out = MethodOutcome(method, np.zeros((n_g, 4), np.int64), raw_evm=np.zeros((n_g, 2)))
    mode = cfg.psf.mode
    if mode in ("known", "both"):
        out.psf_counts, out.psf_evm = np.zeros((n_g, 4), np.int64), np.zeros((n_g, 2))
    if mode in ("unknown", "both"):
        out.em_counts, out.em_evm = np.zeros((n_g, 4), np.int64), np.zeros((n_g, 2))
        out.em_params = np.zeros((n_g, 4, S.shape[0]))
        out.flip_truth = np.zeros((n_g, 2, S.shape[0]))
    for g, gamma in enumerate(cfg.gamma_grid):
        S_tilde = (np.abs(Xa) > gamma).astype(np.int8)
        out.raw_counts[g] = ev.detection_counts(S, S_tilde)
        out.raw_evm[g] = ev.evm_sums(X, np.where(S_tilde == 1, Xa, 0), S, S_tilde)[:2]
        if out.psf_counts is not None:
            res = psf.psf_pipeline(Xa, gamma, cfg.scenario.hmm, cfg.psf.bac)
            out.psf_counts[g] = ev.detection_counts(S, res.states)
            out.psf_evm[g] = ev.evm_sums(X, res.signal, S, res.states)[:2]
        if out.em_counts is not None:
            res = psf.psf_pipeline(Xa, gamma, em_config=cfg.psf.em)
            out.em_counts[g] = ev.detection_counts(S, res.states)
            out.em_evm[g] = ev.evm_sums(X, res.signal, S, res.states)[:2]
            out.em_params[g] = [res.hmm.p, res.hmm.q, res.bac.p_flip, res.bac.q_flip]
            out.flip_truth[g] = empirical_flips(S, S_tilde)
    return out


def run_trial(cfg: ExperimentConfig, trial: int) -> TrialResult:
    """One Monte-Carlo trial of every configured method on a shared scenario."""
    seed = trial_seed(cfg.seed, trial)
    scen = sc.generate(dataclasses.replace(cfg.scenario, seed=seed))
    result = TrialResult(trial, seed)
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            dlc = dataclasses.replace(cfg.dl, solver=method, n_atoms=cfg.scenario.n_sources)
            res = dl.run_dl(scen.observations, dlc, cfg.params_for(method), seed=seed)
            outcome = score_estimate(cfg, scen, res.signal, method)
            outcome.dl_iterations = res.iterations
        except Exception as exc:  # a failed method must not sink the other methods or trials
            log.warning("trial %d method %s failed: %s", trial, method, exc)
            result.errors[method] = repr(exc)
            continue
        outcome.seconds = time.perf_counter() - t0
        result.outcomes[method] = outcome
    return result


def collect_curves(cfg: ExperimentConfig, trials: list[TrialResult]) -> dict[str, ev.RocCurve]:
    """Pool trial outcomes into ROC curves keyed ``"<method>/<raw|psf|em>"``."""
    curves = {}
    for method in cfg.methods:
        outs = [t.outcomes[method] for t in trials if method in t.outcomes]
        if not outs:
            continue
        for variant, attr in (("raw", "raw"), ("psf", "psf"), ("em", "em")):
            counts = [getattr(o, f"{attr}_counts") for o in outs]
            if counts[0] is None:
                continue
            evm_parts = [getattr(o, f"{attr}_evm") for o in outs]
            curves[f"{method}/{variant}"] = ev.roc_from_trials(f"{method}/{variant}", cfg.gamma_grid, counts, evm_parts)
    return curves


def run_experiment(cfg: ExperimentConfig, workers: int = 1, progress=None) -> list[TrialResult]:
    """Run all trials; results come back ordered by trial index."""
    indices = range(cfg.trials)
    if workers <= 1:
        results = []
        for i in indices:
            results.append(run_trial(cfg, i))
            if progress:
                progress(results[-1])
        return results
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_trial, cfg, i) for i in indices]
        results = []
        for f in futures:
            results.append(f.result())
            if progress:
                progress(results[-1])
    return sorted(results, key=lambda r: r.trial)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[int, float | None, ExperimentConfig]]:
    """``(sweep_index, value, config)`` for every sweep point (one point if no sweep)."""
    if cfg.sweep_axis is None:
        return [(0, None, cfg)]
    return [(i, float(v), apply_sweep(cfg, v)) for i, v in enumerate(cfg.sweep_grid)]


def _run_task(task):
    cfg, trial, sweep_index = task
    return sweep_index, run_trial(cfg, trial)


def run_sweep(cfg: ExperimentConfig, workers: int = 1, progress=None) -> dict[int, list[TrialResult]]:
    """Run every (sweep point, trial) pair; trials share one worker pool.

    Results are keyed by sweep index and sorted by trial, so they do not
    depend on the worker count or completion order.
    """
    tasks = [(pcfg, t, i) for i, _, pcfg in sweep_points(cfg) for t in range(cfg.trials)]
    out: dict[int, list[TrialResult]] = {i: [] for i, _, _ in sweep_points(cfg)}
    if workers <= 1:
        done = map(_run_task, tasks)
        for i, res in done:
            out[i].append(res)
            if progress:
                progress(i, res)
    else:
        from concurrent.futures import ProcessPoolExecutor, as_completed

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_task, task) for task in tasks]
            for fut in as_completed(futures):
                i, res = fut.result()
                out[i].append(res)
                if progress:
                    progress(i, res)
    for i in out:
        out[i].sort(key=lambda r: r.trial)
    return out


def evm_at_min_pd(curve: ev.RocCurve, min_pd: float = 0.8) -> tuple[float, int | None]:
    """Smallest pooled EVM over the gamma grid among points with pd >= ``min_pd``.

    Returns ``(evm_percent, gamma_index)``; ``(nan, None)`` if no point qualifies.
    """
    evm = curve.evm_percent
    ok = (curve.pd >= min_pd) & np.isfinite(evm)
    if not ok.any():
        return float("nan"), None
    idx = int(np.flatnonzero(ok)[np.argmin(evm[ok])])
    return float(evm[idx]), idx
