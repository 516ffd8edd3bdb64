"""Secret-key capacity of a downlink training sequence.

All capacities are in bits. Three analytic evaluations are provided:

* :func:`capacity_determinant` builds the joint covariance of the BS and user
  observations and evaluates the Gaussian mutual information directly,
* :func:`capacity_woodbury` uses the reduced ``S x S`` mode-space expression,
* :func:`capacity_parallel` is the per-mode closed form valid when the
  training is aligned with the user's eigenvectors.

:func:`capacity_monte_carlo` is a sampling-based cross-check of all three.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ._linalg import check_hermitian, hermitize, logdet_pd
from .channel import UserStatistics, sample_channel, complex_normal
from .errors import InvalidInput, InvalidParameter

LN2 = math.log(2.0)
MIN_MC_SAMPLES = 10_000


class Criterion(str, enum.Enum):
    SUM = "sum"
    MIN = "min"
    WEIGHTED_SUM = "weighted_sum"
    WEIGHTED_MIN = "weighted_min"

    @property
    def is_min(self) -> bool:
        return self in (Criterion.MIN, Criterion.WEIGHTED_MIN)

    @property
    def is_weighted(self) -> bool:
        return self in (Criterion.WEIGHTED_SUM, Criterion.WEIGHTED_MIN)


@dataclass(frozen=True)
class TrainingSequence:
    """Downlink pilot matrix ``S`` of shape ``(M, T)``; column ``t`` is the pilot sent in slot ``t``.

    ``coherence`` is set by multi-user designs built from non-orthogonal users
    (largest cross-user eigenvector overlap) and is ``None`` otherwise.
    """

    S: np.ndarray
    coherence: float | None = None

    def __post_init__(self):
        S = np.asarray(self.S, dtype=complex)
        if S.ndim == 1:
            S = S[:, None]
        if S.ndim != 2:
            raise InvalidInput(f"training matrix must be 2-D, got shape {S.shape}")
        object.__setattr__(self, "S", S)

    @property
    def M(self) -> int:
        return self.S.shape[0]

    @property
    def T(self) -> int:
        return self.S.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        return hermitize(self.S @ self.S.conj().T)

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.S) ** 2))

    @classmethod
    def empty(cls, M: int) -> "TrainingSequence":
        return cls(np.zeros((M, 0), dtype=complex))

    def check_budget(self, budget: float) -> "TrainingSequence":
        if self.power > budget + 1e-9 * max(1.0, budget):
            raise InvalidInput(f"training power {self.power:.6g} exceeds budget {budget:.6g}")
        return self


@dataclass(frozen=True)
class CapacityReport:
    per_user: tuple
    average: float
    sum: float
    criterion_value: float

    @classmethod
    def from_capacities(cls, per_user, criterion=Criterion.SUM, weights=None) -> "CapacityReport":
        caps = tuple(max(float(c), 0.0) for c in per_user)
        return cls(
            per_user=caps,
            average=average_capacity(caps),
            sum=float(sum(caps)),
            criterion_value=criterion_value(caps, criterion, weights),
        )


def criterion_value(caps, criterion=Criterion.SUM, weights=None) -> float:
    """Scalar objective: sum, min, ``sum(beta*C)`` or ``min(C/beta)``."""
    criterion = Criterion(criterion)
    caps = np.asarray(caps, dtype=float)
    beta = np.ones_like(caps) if weights is None else np.asarray(weights, dtype=float)
    if criterion is Criterion.SUM:
        return float(caps.sum())
    if criterion is Criterion.MIN:
        return float(caps.min())
    if criterion is Criterion.WEIGHTED_SUM:
        return float(np.dot(beta, caps))
    return float(np.min(caps / beta))


def _as_dl_covariance(seq, M):
    if isinstance(seq, TrainingSequence):
        if seq.M != M:
            raise InvalidInput(f"training sequence has {seq.M} antennas, user has {M}")
        return seq.covariance
    C = check_hermitian(seq, "training covariance", psd=True)
    if C.shape[0] != M:
        raise InvalidInput(f"training covariance has order {C.shape[0]}, user has {M}")
    return C


def woodbury_bits(lam, ul_snr, G) -> float:
    """Capacity in bits given mode gains ``lam`` and ``G = Q^H C_DL Q / noise_var``.

    With ``D = diag(sqrt(lam))`` and ``B = I + D G D`` the expression
    ``log|Lam + I/rho| - log|I/rho + (Lam^-1 + G)^-1|`` equals
    ``log|Lam + I/rho| - log|Lam + B/rho| + log|B|``; the latter only involves
    well-conditioned positive-definite matrices.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return 0.0
    d = np.sqrt(lam)
    B = np.eye(lam.size) + d[:, None] * G * d[None, :]
    L = np.diag(lam)
    nats = (
        float(np.sum(np.log(lam + 1.0 / ul_snr)))
        - logdet_pd(L + B / ul_snr)
        + logdet_pd(B)
    )
    return max(nats / LN2, 0.0)


def capacity_woodbury(user: UserStatistics, seq, dl_noise_var: float) -> float:
    """Secret-key capacity from the mode-space (Woodbury) expression.

    ``seq`` is either a :class:`TrainingSequence` or an ``M x M`` training
    covariance ``C_DL``.
    """
    if not dl_noise_var > 0:
        raise InvalidParameter("dl_noise_var must be > 0")
    modes = user.modes
    C = _as_dl_covariance(seq, modes.M)
    G = hermitize(modes.Q.conj().T @ C @ modes.Q) / dl_noise_var
    return woodbury_bits(modes.lam, user.uplink_snr, G)


def capacity_determinant(user: UserStatistics, seq: TrainingSequence, dl_noise_var: float,
                         projected: bool = True) -> float:
    """Mutual information between BS and user observations from their joint covariance.

    The BS observation is ``z_ul = sqrt(rho) h + w`` (unit UL noise) and the
    user observes ``z_dl = S^H h + w_dl``. With ``projected=True`` the BS
    observation is first reduced to ``Q^H z_ul``, which loses no information
    about ``h``; with ``projected=False`` the full ``M``-dimensional
    observation is used.

    Returns ``log2|C_ul| - log2|C_ul - C_x C_dl^-1 C_x^H|``.
    """
    if not dl_noise_var > 0:
        raise InvalidParameter("dl_noise_var must be > 0")
    if not isinstance(seq, TrainingSequence):
        seq = TrainingSequence(seq)
    modes, rho = user.modes, user.uplink_snr
    if seq.M != modes.M:
        raise InvalidInput(f"training sequence has {seq.M} antennas, user has {modes.M}")
    if seq.T == 0 or modes.S == 0:
        return 0.0
    R = modes.covariance()
    S = seq.S
    C_dl = hermitize(S.conj().T @ R @ S) + dl_noise_var * np.eye(seq.T)
    if projected:
        C_ul = np.diag(rho * modes.lam + 1.0).astype(complex)
        C_x = math.sqrt(rho) * (modes.lam[:, None] * (modes.Q.conj().T @ S))
    else:
        C_ul = rho * R + np.eye(modes.M)
        C_x = math.sqrt(rho) * (R @ S)
    schur = C_ul - C_x @ np.linalg.solve(C_dl, C_x.conj().T)
    return max((logdet_pd(C_ul) - logdet_pd(schur)) / LN2, 0.0)


def capacity_parallel(lam, ul_snr: float, dl_mode_snr) -> float:
    """Closed form ``sum_s log2(1 + lam^2 rho rho_s / (lam (rho + rho_s) + 1))``."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    rho_dl = np.asarray(dl_mode_snr, dtype=float).reshape(-1)
    if lam.shape != rho_dl.shape:
        raise InvalidParameter(f"{lam.size} mode gains but {rho_dl.size} DL SNRs")
    if not ul_snr > 0:
        raise InvalidParameter("ul_snr must be > 0")
    if np.any(rho_dl < 0):
        raise InvalidParameter("DL mode SNRs must be non-negative")
    if np.any(lam < 0):
        raise InvalidParameter("mode gains must be non-negative")
    ratio = lam**2 * ul_snr * rho_dl / (lam * (ul_snr + rho_dl) + 1.0)
    return float(np.sum(np.log1p(ratio)) / LN2)


class MonteCarloEstimate(NamedTuple):
    estimate: float
    stderr: float


def _gaussian_mi_bits(cov, d_ul):
    # log|C_uu| - log|C_uu - C_ud C_dd^-1 C_du| on a joint second-moment matrix
    cov = hermitize(cov)
    C_uu, C_ud, C_dd = cov[:d_ul, :d_ul], cov[:d_ul, d_ul:], cov[d_ul:, d_ul:]
    schur = C_uu - C_ud @ np.linalg.solve(C_dd, C_ud.conj().T)
    return (logdet_pd(C_uu) - logdet_pd(schur)) / LN2


def capacity_monte_carlo(user: UserStatistics, seq: TrainingSequence, dl_noise_var: float,
                         n_samples: int, rng: np.random.Generator,
                         n_blocks: int = 100) -> MonteCarloEstimate:
    """Plug-in Gaussian MI on simulated observation pairs, with a grouped jackknife error.

    Channels, UL noise and DL noise are drawn independently; the BS
    observation is projected on the user's modes. Second moments are computed
    without centering (all quantities are zero mean by construction). The
    jackknife deletes one of ``n_blocks`` contiguous sample blocks at a time.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise InvalidParameter(f"n_samples must be >= {MIN_MC_SAMPLES}, got {n_samples}")
    if not 2 <= n_blocks <= n_samples:
        raise InvalidParameter("n_blocks must lie in [2, n_samples]")
    if not isinstance(seq, TrainingSequence):
        seq = TrainingSequence(seq)
    modes = user.modes
    if seq.T == 0 or modes.S == 0:
        return MonteCarloEstimate(0.0, 0.0)

    h = sample_channel(modes, rng, size=n_samples)
    w_ul = complex_normal(rng, (modes.M, n_samples))
    w_dl = complex_normal(rng, (seq.T, n_samples))
    z_ul = modes.Q.conj().T @ (math.sqrt(user.uplink_snr) * h + w_ul)
    z_dl = seq.S.conj().T @ h + math.sqrt(dl_noise_var) * w_dl
    X = np.vstack([z_ul, z_dl])

    bounds = np.linspace(0, n_samples, n_blocks + 1).astype(int)
    blocks = [X[:, a:b] @ X[:, a:b].conj().T for a, b in zip(bounds[:-1], bounds[1:])]
    total = sum(blocks)
    estimate = _gaussian_mi_bits(total / n_samples, modes.S)
    loo = np.array([
        _gaussian_mi_bits((total - blk) / (n_samples - (b - a)), modes.S)
        for blk, a, b in zip(blocks, bounds[:-1], bounds[1:])
    ])
    var = (n_blocks - 1) / n_blocks * np.sum((loo - loo.mean()) ** 2)
    return MonteCarloEstimate(float(estimate), float(math.sqrt(var)))


def average_capacity(caps: Sequence[float]) -> float:
    caps = list(caps)
    if not caps:
        raise InvalidParameter("average capacity of an empty user set")
    return float(sum(caps) / len(caps))


def evaluate(users: Sequence[UserStatistics], seq, dl_noise_var: float,
             criterion=Criterion.SUM, weights=None) -> CapacityReport:
    """Per-user capacities (Woodbury form) collected into a report."""
    caps = [capacity_woodbury(u, seq, dl_noise_var) for u in users]
    return CapacityReport.from_capacities(caps, criterion, weights)
