"""Ground-truth generation: Markov activity, source symbols, channels, observations."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParameterError(ValueError):
    """Raised for invalid probabilities or dimensions."""


class SignalDistribution(str, enum.Enum):
    UNIT_GAUSSIAN = "unit-gaussian"
    BPSK = "bpsk"


@dataclass(frozen=True)
class HmmParams:
    """Two-state activity chain; ``p`` is Pr(0 -> 1), ``q`` is Pr(1 -> 0).

    Either field may be a scalar shared by every source or a per-source
    sequence.
    """

    p: float | tuple[float, ...] = 0.0022
    q: float | tuple[float, ...] = 0.02

    def __post_init__(self):
        p, q = np.asarray(self.p, dtype=float), np.asarray(self.q, dtype=float)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ParameterError("transition probabilities must be finite")
        if np.any((p < 0) | (p > 1)) or np.any((q < 0) | (q > 1)):
            raise ParameterError(f"transition probabilities outside [0, 1]: p={self.p}, q={self.q}")
        if np.any(p + q <= 0):
            raise ParameterError("p + q must be positive for a stationary distribution")

    def per_source(self, n_sources: int) -> tuple[np.ndarray, np.ndarray]:
        p = np.broadcast_to(np.asarray(self.p, dtype=float), (n_sources,)).copy()
        q = np.broadcast_to(np.asarray(self.q, dtype=float), (n_sources,)).copy()
        return p, q

    @property
    def stationary_active(self) -> np.ndarray | float:
        p, q = np.asarray(self.p, dtype=float), np.asarray(self.q, dtype=float)
        out = p / (p + q)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScenarioConfig:
    n_sources: int = 30
    n_sensors: int = 20
    horizon: int = 1000
    snr_db: float = 30.0
    hmm: HmmParams = field(default_factory=HmmParams)
    dist: SignalDistribution = SignalDistribution.UNIT_GAUSSIAN
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1 or self.n_sensors < 1:
            raise ParameterError("need at least one source and one sensor")
        if self.horizon < 2:
            raise ParameterError("horizon must be at least 2")
        object.__setattr__(self, "dist", SignalDistribution(self.dist))
        if isinstance(self.hmm, dict):
            object.__setattr__(self, "hmm", HmmParams(**self.hmm))

    @property
    def noise_variance(self) -> float:
        return snr_to_noise_variance(self.snr_db)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dist"] = self.dist.value
        for key in ("p", "q"):
            if isinstance(d["hmm"][key], tuple):
                d["hmm"][key] = list(d["hmm"][key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        hmm = d.pop("hmm", {})
        hmm = {k: tuple(v) if isinstance(v, list) else v for k, v in hmm.items()}
        return cls(hmm=HmmParams(**hmm), **d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Scenario:
    """One realization of Y = HX + Z together with its hidden activity."""

    config: ScenarioConfig
    states: np.ndarray  # N x T, {0, 1}
    signals: np.ndarray  # N x T complex
    channel: np.ndarray  # M x N complex, unit-norm columns
    observations: np.ndarray  # M x T complex
    noise_variance: float


def snr_to_noise_variance(snr_db: float) -> float:
    # unit-power symbols and unit-norm channel columns: SNR = 1 / sigma^2
    if np.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(10.0 ** (-snr_db / 10.0))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_activation(cfg: ScenarioConfig, seed=None, initial=None) -> np.ndarray:
    """Sample an N x T binary activity matrix, one Markov chain per row.

    The first state of each row is drawn from the stationary law
    Pr(active) = p / (p + q) unless ``initial`` pins it.
    """
    rng = _rng(cfg.seed if seed is None else seed)
    n, T = cfg.n_sources, cfg.horizon
    p, q = cfg.hmm.per_source(n)
    s = np.zeros((n, T), dtype=np.int8)
    if initial is None:
        s[:, 0] = rng.random(n) < p / (p + q)
    else:
        s[:, 0] = np.broadcast_to(np.asarray(initial, dtype=np.int8), (n,))
    u = rng.random((n, T - 1))
    for t in range(1, T):
        prev = s[:, t - 1]
        s[:, t] = np.where(prev == 1, u[:, t - 1] >= q, u[:, t - 1] < p)
    return s


def sample_signals(states: np.ndarray, dist: SignalDistribution | str, seed=None) -> np.ndarray:
    """Draw i.i.d. symbols where ``states`` is 1 and exact zeros elsewhere.

    Both distributions are real-valued and carried as complex128.
    """
    rng = _rng(seed)
    dist = SignalDistribution(dist)
    states = np.asarray(states)
    if dist is SignalDistribution.BPSK:
        draws = rng.choice(np.array([-1.0, 1.0]), size=states.shape)
    else:
        draws = rng.standard_normal(states.shape)
    return np.where(states == 1, draws, 0.0).astype(np.complex128)


def complex_gaussian(shape, rng: np.random.Generator, variance: float = 1.0) -> np.ndarray:
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_channel(n_sensors: int, n_sources: int, seed=None) -> np.ndarray:
    """Circularly-symmetric Gaussian M x N channel with unit-norm columns."""
    if n_sensors < 1 or n_sources < 1:
        raise ParameterError("channel dimensions must be positive")
    rng = _rng(seed)
    H = complex_gaussian((n_sensors, n_sources), rng)
    return H / np.linalg.norm(H, axis=0, keepdims=True)


def synthesize_observations(H: np.ndarray, X: np.ndarray, snr_db: float, seed=None) -> tuple[np.ndarray, float]:
    """Return ``(Y, sigma2)`` with Y = HX + Z and Z ~ CN(0, sigma2)."""
    H, X = np.asarray(H), np.asarray(X)
    if H.ndim != 2 or X.ndim != 2 or H.shape[1] != X.shape[0]:
        raise ParameterError(f"dimension mismatch: H {H.shape}, X {X.shape}")
    rng = _rng(seed)
    sigma2 = snr_to_noise_variance(snr_db)
    Y = H @ X
    if sigma2 > 0:
        Y = Y + complex_gaussian(Y.shape, rng, sigma2)
    return Y, sigma2


def generate(cfg: ScenarioConfig) -> Scenario:
    """Generate a full scenario; every draw comes from a child of ``cfg.seed``."""
    ss_act, ss_sig, ss_chan, ss_noise = np.random.SeedSequence(cfg.seed).spawn(4)
    states = sample_activation(cfg, seed=np.random.default_rng(ss_act))
    X = sample_signals(states, cfg.dist, seed=np.random.default_rng(ss_sig))
    H = sample_channel(cfg.n_sensors, cfg.n_sources, seed=np.random.default_rng(ss_chan))
    Y, sigma2 = synthesize_observations(H, X, cfg.snr_db, seed=np.random.default_rng(ss_noise))
    return Scenario(cfg, states, X, H, Y, sigma2)


def format_complex(z: complex) -> str:
    """``re+imi`` text with exact (repr) components, e.g. ``0.5-1.25i``."""
    z = complex(z)
    im = repr(z.imag)
    return f"{z.real!r}{im if im.startswith('-') else '+' + im}i"


def parse_complex(text: str) -> complex:
    text = text.strip()
    return complex(text[:-1] + "j") if text.endswith("i") else complex(float(text))


def write_matrix_csv(path: str | Path, M: np.ndarray, layout: str = "long") -> None:
    """Write a matrix as CSV; floats use ``repr`` so the round trip is exact.

    ``layout="long"``: header ``row,col,re,im`` (complex) or ``row,col,value``
    (real/integer), one entry per line. ``layout="wide"``: no header, one
    line per matrix row, complex cells written as ``re+imi``.
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise ParameterError(f"expected a matrix, got shape {M.shape}")
    if layout not in ("long", "wide"):
        raise ValueError(f"unknown layout {layout!r}")
    with open(path, "w", newline="") as fh:
        if layout == "wide":
            cell = format_complex if np.iscomplexobj(M) else (lambda v: repr(v.item()))
            for row in M:
                fh.write(",".join(cell(v) for v in row) + "\n")
            return
        rows, cols = np.indices(M.shape)
        if np.iscomplexobj(M):
            fh.write("row,col,re,im\n")
            for r, c, v in zip(rows.ravel(), cols.ravel(), M.ravel()):
                fh.write(f"{r},{c},{float(v.real)!r},{float(v.imag)!r}\n")
        else:
            fh.write("row,col,value\n")
            for r, c, v in zip(rows.ravel(), cols.ravel(), M.ravel()):
                fh.write(f"{r},{c},{v.item()!r}\n")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_matrix_csv` for either layout (detected from the first line)."""
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("row,col"):
            lines = [first] + [ln.strip() for ln in fh if ln.strip()]
            cells = [ln.split(",") for ln in lines if ln]
            if any(c.endswith("i") for row in cells for c in row):
                return np.array([[parse_complex(c) for c in row] for row in cells], dtype=np.complex128)
            return np.array([[float(c) for c in row] for row in cells])
        header = first.split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header[2:] not in (["re", "im"], ["value"]):
        raise ValueError(f"{path}: unrecognized matrix header {header}")
    shape = (int(data[:, 0].max()) + 1, int(data[:, 1].max()) + 1) if len(data) else (0, 0)
    idx = (data[:, 0].astype(int), data[:, 1].astype(int))
    if header[2:] == ["re", "im"]:
        out = np.zeros(shape, dtype=np.complex128)
        out[idx] = data[:, 2] + 1j * data[:, 3]
    else:
        out = np.zeros(shape)
        out[idx] = data[:, 2]
    return out
