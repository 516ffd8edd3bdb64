"""Channel covariance models, compact spatial-mode bases and channel sampling.

Angles are in degrees throughout. Array element positions are expressed in
wavelengths; the steering vector towards azimuth ``az`` / elevation ``el`` is
``exp(2j*pi * p . u)`` with ``u = (cos el cos az, cos el sin az, sin el)``, so a
linear array laid along the y axis has its broadside at azimuth 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._linalg import check_hermitian, hermitize
from .errors import InvalidInput, InvalidParameter

DEFAULT_RANK_TOL = 1e-8
QUADRATURE_NODES = 64
TRUNCATION_SPREADS = 4.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna element positions, shape ``(M, 3)``, in wavelengths."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise InvalidParameter(f"element positions must have shape (M, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InvalidParameter("element positions must be finite")
        object.__setattr__(self, "positions", pos)

    @property
    def M(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def ula(cls, M: int, spacing: float = 0.5) -> "ArrayGeometry":
        """Uniform linear array along the y axis."""
        if M < 1:
            raise InvalidParameter("M must be >= 1")
        pos = np.zeros((M, 3))
        pos[:, 1] = spacing * np.arange(M)
        return cls(pos)

    @classmethod
    def upa(cls, rows: int, cols: int, spacing: float = 0.5) -> "ArrayGeometry":
        """Uniform planar array in the y-z plane: ``cols`` horizontal by ``rows`` vertical."""
        if rows < 1 or cols < 1:
            raise InvalidParameter("rows and cols must be >= 1")
        pos = np.array(
            [(0.0, spacing * c, spacing * r) for r, c in itertools.product(range(rows), range(cols))]
        )
        return cls(pos)

    def steering(self, azimuth, elevation) -> np.ndarray:
        """Steering vectors, one column per (azimuth, elevation) pair (degrees)."""
        az = np.deg2rad(np.atleast_1d(np.asarray(azimuth, dtype=float)))
        el = np.deg2rad(np.atleast_1d(np.asarray(elevation, dtype=float)))
        az, el = np.broadcast_arrays(az, el)
        u = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return np.exp(2j * np.pi * (self.positions @ u))


@dataclass(frozen=True)
class Cluster:
    """A scattering cluster seen from the base station (angles in degrees)."""

    azimuth: float
    elevation: float = 0.0
    angular_spread: float = 5.0
    power: float = 1.0


@dataclass(frozen=True)
class SpatialModeBasis:
    """Compact eigen-decomposition ``R = Q diag(lam) Q^H`` with ``lam > 0`` descending."""

    Q: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=complex)
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if Q.ndim != 2 or Q.shape[1] != lam.size:
            raise InvalidInput(f"Q shape {Q.shape} does not match {lam.size} mode gains")
        if np.any(lam <= 0):
            raise InvalidInput("mode gains must be strictly positive")
        if np.any(np.diff(lam) > 0):
            raise InvalidInput("mode gains must be sorted in non-increasing order")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "lam", lam)

    @property
    def M(self) -> int:
        return self.Q.shape[0]

    @property
    def S(self) -> int:
        return self.lam.size

    def covariance(self) -> np.ndarray:
        return hermitize((self.Q * self.lam) @ self.Q.conj().T)

    def truncated(self, n_modes: int) -> "SpatialModeBasis":
        """Basis restricted to the ``n_modes`` strongest modes."""
        return SpatialModeBasis(self.Q[:, :n_modes], self.lam[:n_modes])


@dataclass(frozen=True)
class UserStatistics:
    """Second-order statistics of one user: spatial modes plus linear UL SNR."""

    modes: SpatialModeBasis
    uplink_snr: float = field(default=1.0)

    def __post_init__(self):
        if not self.uplink_snr > 0:
            raise InvalidParameter(f"uplink_snr must be > 0, got {self.uplink_snr}")

    @classmethod
    def from_covariance(cls, R, uplink_snr, rank_tol=DEFAULT_RANK_TOL) -> "UserStatistics":
        return cls(compact_eig(R, rank_tol), uplink_snr)


def make_exp_correlation(M: int, rho: complex) -> np.ndarray:
    """Exponential correlation model ``R[i, j] = rho**(j - i)`` for ``i <= j``.

    The lower triangle is the conjugate, so the result is Hermitian with unit
    diagonal and positive definite for ``|rho| < 1``.
    """
    if M < 1:
        raise InvalidParameter("M must be >= 1")
    if abs(rho) >= 1:
        raise InvalidParameter(f"|rho| must be < 1, got {abs(rho)}")
    idx = np.arange(M)
    lag = idx[None, :] - idx[:, None]
    upper = np.power(complex(rho), np.abs(lag))
    return np.where(lag >= 0, upper, upper.conj())


def make_clustered_covariance(geom: ArrayGeometry, clusters: Sequence[Cluster]) -> np.ndarray:
    """Covariance of a sum of clusters with Gaussian azimuth spread.

    Each cluster contributes ``power * E[a(az) a(az)^H]`` where ``az`` is
    Gaussian around the cluster azimuth with standard deviation
    ``angular_spread``. The steering vector is 2*pi periodic in azimuth, so
    integrating the plain Gaussian equals integrating its wrapped version.
    The expectation is a Gauss-Legendre rule over +-4 spreads, renormalized to
    the truncated mass. The result is scaled to ``trace(R) = M``.
    """
    clusters = list(clusters)
    if not clusters:
        raise InvalidParameter("at least one cluster is required")
    x, w = np.polynomial.legendre.leggauss(QUADRATURE_NODES)
    x = TRUNCATION_SPREADS * x
    weights = w * np.exp(-0.5 * x**2)
    weights /= weights.sum()
    R = np.zeros((geom.M, geom.M), dtype=complex)
    for c in clusters:
        if not c.power > 0:
            raise InvalidParameter(f"cluster power must be > 0, got {c.power}")
        if not c.angular_spread > 0:
            raise InvalidParameter(f"cluster angular spread must be > 0, got {c.angular_spread}")
        A = geom.steering(c.azimuth + c.angular_spread * x, c.elevation)
        R += c.power * (A * weights) @ A.conj().T
    R = hermitize(R)
    return R * (geom.M / np.trace(R).real)


def _fix_phase(U):
    # first component with non-negligible magnitude made real-positive
    U = U.copy()
    for s in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, s]) > 1e-8)
        if nz.size:
            v = U[nz[0], s]
            U[:, s] *= np.conj(v) / abs(v)
    return U


def compact_eig(R, rank_tol: float = DEFAULT_RANK_TOL) -> SpatialModeBasis:
    """Keep eigen-pairs of ``R`` with ``lam >= rank_tol * lam_max``.

    Modes are sorted by decreasing gain (stable with respect to the solver's
    order) and each eigenvector's phase is fixed so that its first nonzero
    entry is real and positive.
    """
    if not 0 < rank_tol < 1:
        raise InvalidParameter(f"rank_tol must lie in (0, 1), got {rank_tol}")
    R = check_hermitian(R, "covariance")
    w, U = np.linalg.eigh(hermitize(R))
    order = np.argsort(-w, kind="stable")
    w, U = w[order], U[:, order]
    if w.size == 0 or w[0] <= 0:
        return SpatialModeBasis(np.zeros((R.shape[0], 0), dtype=complex), np.zeros(0))
    keep = w >= rank_tol * w[0]
    return SpatialModeBasis(_fix_phase(U[:, keep]), w[keep])


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the only RNG used by the package."""
    return np.random.Generator(np.random.Philox(seed))


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard circularly-symmetric complex Gaussians (unit variance) via Box-Muller."""
    u1 = 1.0 - rng.random(shape)  # in (0, 1]
    u2 = rng.random(shape)
    return np.sqrt(-np.log(u1)) * np.exp(2j * np.pi * u2)


def sample_channel(modes: SpatialModeBasis, rng: np.random.Generator, size: int | None = None):
    """Draw ``h = Q diag(sqrt(lam)) g`` with ``g ~ CN(0, I)``.

    Returns a length-``M`` vector, or an ``(M, size)`` array of independent
    draws when ``size`` is given.
    """
    n = 1 if size is None else size
    g = complex_normal(rng, (modes.S, n))
    h = modes.Q @ (np.sqrt(modes.lam)[:, None] * g)
    return h[:, 0] if size is None else h


def cross_user_coherence(bases: Sequence[SpatialModeBasis]) -> float:
    """Largest ``|q_{s,k}^H q_{s',k'}|`` over pairs of distinct users."""
    bases = list(bases)
    if len(bases) < 2:
        raise InvalidParameter("cross-user coherence needs at least two users")
    if len({b.M for b in bases}) != 1:
        raise InvalidParameter("all bases must share the same antenna count")
    best = 0.0
    for a, b in itertools.combinations(bases, 2):
        if a.S and b.S:
            best = max(best, float(np.max(np.abs(a.Q.conj().T @ b.Q))))
    return min(best, 1.0)


# -- text matrix format -------------------------------------------------------

def _format_entry(z: complex) -> str:
    return f"{z.real:.17g}{z.imag:+.17g}i"


def dump_matrix(path, A) -> None:
    """Write a complex matrix in the ``re+im`` text format.

    The header is ``"M re+im"`` for square matrices and ``"M T re+im"`` for
    rectangular ones, followed by one whitespace-separated line per row.
    """
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    rows, cols = A.shape
    header = f"{rows} re+im" if rows == cols else f"{rows} {cols} re+im"
    lines = [header] + [" ".join(_format_entry(z) for z in row) for row in A]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInput("empty matrix file")
    head = lines[0].split()
    if not head or head[-1] != "re+im" or len(head) not in (2, 3):
        raise InvalidInput(f"bad matrix header {lines[0]!r}; expected 'M re+im'")
    try:
        rows = int(head[0])
        cols = int(head[1]) if len(head) == 3 else rows
    except ValueError as exc:
        raise InvalidInput(f"bad matrix header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise InvalidInput(f"expected {rows} rows, found {len(body)}")
    A = np.empty((rows, cols), dtype=complex)
    for i, line in enumerate(body):
        tokens = line.split()
        if len(tokens) != cols:
            raise InvalidInput(f"row {i + 1}: expected {cols} entries, found {len(tokens)}")
        for j, tok in enumerate(tokens):
            try:
                A[i, j] = complex(tok[:-1] + "j" if tok.endswith("i") else tok)
            except ValueError as exc:
                raise InvalidInput(f"row {i + 1}, column {j + 1}: cannot parse {tok!r}") from exc
    return A


def load_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text())


def load_covariance(path) -> np.ndarray:
    """Load a covariance matrix file and check it is Hermitian PSD."""
    return check_hermitian(load_matrix(path), str(path), psd=True, atol=1e-9)


def user_bases(users: Iterable[UserStatistics]):
    return [u.modes for u in users]
